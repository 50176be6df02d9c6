//! Probabilistic roadmap over a [`World`], shortest-path queries and plan
//! following.

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::world::World;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrmConfig {
    pub n_samples: usize,
    pub connect_distance: f64,
    /// Spacing of collision samples along candidate edges.
    pub sample_step: f64,
    /// Clearance radius used for vertex and edge validation.
    pub radius: f64,
    pub seed: u64,
}

impl Default for PrmConfig {
    fn default() -> Self {
        Self {
            n_samples: 150,
            connect_distance: 2.0,
            sample_step: 0.055,
            radius: 0.15,
            seed: 0,
        }
    }
}

/// Undirected roadmap with Euclidean edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GraphFile", try_from = "GraphFile")]
pub struct PrmGraph {
    pub vertices: Vec<Vec2>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    vertices: Vec<[f64; 2]>,
    edges: Vec<(usize, usize, f64)>,
}

impl From<PrmGraph> for GraphFile {
    fn from(g: PrmGraph) -> Self {
        GraphFile {
            vertices: g.vertices.iter().map(|&v| v.into()).collect(),
            edges: g.edges().collect(),
        }
    }
}

impl TryFrom<GraphFile> for PrmGraph {
    type Error = Error;
    fn try_from(f: GraphFile) -> Result<Self> {
        let mut g = PrmGraph::new(f.vertices.into_iter().map(Vec2::from).collect());
        for (u, v, w) in f.edges {
            g.add_edge(u, v, w)?;
        }
        g.sort_adjacency();
        Ok(g)
    }
}

impl PrmGraph {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        let adjacency = vec![Vec::new(); vertices.len()];
        Self {
            vertices,
            adjacency,
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn add_edge(&mut self, u: usize, v: usize, w: f64) -> Result<()> {
        let n = self.len();
        for id in [u, v] {
            if id >= n {
                return Err(Error::BadVertex(id));
            }
        }
        self.adjacency[u].push((v, w));
        self.adjacency[v].push((u, w));
        Ok(())
    }

    fn sort_adjacency(&mut self) {
        for nbrs in &mut self.adjacency {
            nbrs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
    }

    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.adjacency[u]
    }

    /// Each undirected edge once, as `(u, v, weight)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(u, nbrs)| {
            nbrs.iter()
                .filter(move |&&(v, _)| u < v)
                .map(move |&(v, w)| (u, v, w))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Sample `n_samples` free vertices and connect every pair within
/// `connect_distance` whose straight segment is collision free.
pub fn build_prm(world: &World, cfg: &PrmConfig) -> Result<PrmGraph> {
    assert!(cfg.n_samples > 0 && cfg.connect_distance > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = world.bounds;
    let budget = 100 * cfg.n_samples;
    let mut vertices = Vec::with_capacity(cfg.n_samples);
    let mut attempts = 0;
    while vertices.len() < cfg.n_samples {
        if attempts == budget {
            return Err(Error::SamplingBudget {
                found: vertices.len(),
                wanted: cfg.n_samples,
                attempts,
            });
        }
        attempts += 1;
        let p = Vec2::new(
            b.min.x + rng.gen::<f64>() * b.width(),
            b.min.y + rng.gen::<f64>() * b.height(),
        );
        if world.point_free(p, cfg.radius) {
            vertices.push(p);
        }
    }
    let mut g = PrmGraph::new(vertices);
    // sampled discs of this radius cover the whole swept footprint
    let swept = cfg.radius.hypot(cfg.sample_step / 2.0);
    for u in 0..g.len() {
        for v in u + 1..g.len() {
            let d = g.vertices[u].dist(g.vertices[v]);
            if d <= cfg.connect_distance
                && world.segment_free(g.vertices[u], g.vertices[v], swept, cfg.sample_step)
            {
                g.add_edge(u, v, d)?;
            }
        }
    }
    g.sort_adjacency();
    Ok(g)
}

/// Closest vertex to `p`; ties go to the lowest index.
pub fn nearest_vertex(g: &PrmGraph, p: Vec2) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in g.vertices.iter().enumerate() {
        let d = v.dist(p);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::EmptyGraph)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPath {
    pub vertices: Vec<usize>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct Label {
    cost: f64,
    path: Vec<usize>,
}

impl Eq for Label {}

impl Ord for Label {
    // reversed so BinaryHeap pops the cheapest, then lexicographically smallest path
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over `(cost, vertex sequence)` labels, so equal-cost paths resolve
/// to the lexicographically smallest id sequence. `None` when unreachable.
pub fn shortest_path(g: &PrmGraph, s: usize, t: usize) -> Result<Option<GraphPath>> {
    for id in [s, t] {
        if id >= g.len() {
            return Err(Error::BadVertex(id));
        }
    }
    let mut best: Vec<Option<Label>> = (0..g.len()).map(|_| None).collect();
    let mut done = vec![false; g.len()];
    let mut heap = BinaryHeap::new();
    heap.push(Label {
        cost: 0.0,
        path: vec![s],
    });
    while let Some(label) = heap.pop() {
        let u = *label.path.last().expect("labels are nonempty");
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == t {
            return Ok(Some(GraphPath {
                vertices: label.path,
                cost: label.cost,
            }));
        }
        for &(v, w) in g.neighbors(u) {
            if done[v] {
                continue;
            }
            let cost = label.cost + w;
            let better = match &best[v] {
                None => true,
                Some(b) => match cost.total_cmp(&b.cost) {
                    Ordering::Less => true,
                    Ordering::Equal => label.path.iter().chain([&v]).lt(b.path.iter()),
                    Ordering::Greater => false,
                },
            };
            if better {
                let mut path = label.path.clone();
                path.push(v);
                best[v] = Some(Label { cost, path: path.clone() });
                heap.push(Label { cost, path });
            }
        }
    }
    Ok(None)
}

/// Waypoints with a cursor at the first one not yet reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub waypoints: Vec<Vec2>,
    pub cursor: usize,
}

impl Plan {
    pub fn new(waypoints: Vec<Vec2>) -> Self {
        assert!(!waypoints.is_empty(), "plan needs at least one waypoint");
        Self {
            waypoints,
            cursor: 0,
        }
    }

    /// Skip every waypoint already within `reach_eps` of `x` (never the last)
    /// and return the current target.
    pub fn advance(&mut self, x: Vec2, reach_eps: f64) -> Vec2 {
        let last = self.waypoints.len() - 1;
        while self.cursor < last && self.waypoints[self.cursor].dist(x) <= reach_eps {
            self.cursor += 1;
        }
        self.waypoints[self.cursor]
    }

    pub fn target(&self) -> Vec2 {
        self.waypoints[self.cursor]
    }

    pub fn final_goal(&self) -> Vec2 {
        *self.waypoints.last().expect("nonempty plan")
    }
}

/// Attach `start` and `goal` to their nearest vertices and route between
/// them. The goal itself is appended when it is not a vertex.
pub fn plan_route(g: &PrmGraph, start: Vec2, goal: Vec2) -> Result<Option<Plan>> {
    let s = nearest_vertex(g, start)?;
    let t = nearest_vertex(g, goal)?;
    Ok(shortest_path(g, s, t)?.map(|path| {
        let mut waypoints: Vec<Vec2> = path.vertices.iter().map(|&i| g.vertices[i]).collect();
        if waypoints.last().map_or(true, |w| *w != goal) {
            waypoints.push(goal);
        }
        Plan::new(waypoints)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use proptest::prelude::*;
    use rand::Rng;

    fn bellman_ford(g: &PrmGraph, s: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; g.len()];
        dist[s] = 0.0;
        for _ in 0..g.len() {
            for (u, v, w) in g.edges() {
                if dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                }
                if dist[v] + w < dist[u] {
                    dist[u] = dist[v] + w;
                }
            }
        }
        dist
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> PrmGraph {
        let vs = (0..n)
            .map(|_| Vec2::new(rng.gen(), rng.gen()))
            .collect::<Vec<_>>();
        let mut g = PrmGraph::new(vs);
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen::<f64>() < p {
                    let w = if rng.gen::<bool>() {
                        rng.gen_range(1..5) as f64
                    } else {
                        rng.gen::<f64>() * 3.0 + 0.01
                    };
                    g.add_edge(u, v, w).unwrap();
                }
            }
        }
        g
    }

    #[test]
    fn empty_world_complete_graph() {
        let w = World::empty(Rect::new(0.0, 0.0, 2.0, 2.0));
        let cfg = PrmConfig {
            n_samples: 4,
            connect_distance: f64::INFINITY,
            ..Default::default()
        };
        let g = build_prm(&w, &cfg).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.edge_count(), 6);
        assert_eq!(g, build_prm(&w, &cfg).unwrap());
        for (u, v, wt) in g.edges() {
            assert_eq!(wt, g.vertices[u].dist(g.vertices[v]));
        }
    }

    #[test]
    fn wall_blocks_edges() {
        let w = World::new(
            Rect::new(0.0, 0.0, 4.0, 4.0),
            vec![Rect::new(0.0, 1.9, 4.0, 2.1)],
            0,
        )
        .unwrap();
        let cfg = PrmConfig {
            n_samples: 60,
            connect_distance: 3.0,
            ..Default::default()
        };
        let g = build_prm(&w, &cfg).unwrap();
        assert!(g.edge_count() > 0);
        for (u, v, _) in g.edges() {
            let (a, b) = (g.vertices[u], g.vertices[v]);
            assert_eq!(a.y < 2.0, b.y < 2.0, "edge crosses the wall");
            assert!(w.segment_free(a, b, cfg.radius, cfg.radius / 20.0));
        }
    }

    #[test]
    fn sampling_budget_error() {
        let w = World::new(
            Rect::new(0.0, 0.0, 1.0, 1.0),
            vec![Rect::new(0.0, 0.0, 1.0, 1.0)],
            0,
        )
        .unwrap();
        assert!(matches!(
            build_prm(&w, &PrmConfig::default()),
            Err(Error::SamplingBudget { .. })
        ));
    }

    #[test]
    fn nearest_vertex_cases() {
        let g = PrmGraph::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(-1.0, 0.0),
            Vec2::new(5.0, 5.0),
        ]);
        assert_eq!(nearest_vertex(&g, Vec2::new(5.0, 5.0)).unwrap(), 3);
        // equidistant to 1 and 2 but closer to 0; shift so 1 and 2 tie
        let g2 = PrmGraph::new(vec![Vec2::new(9.0, 9.0), Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)]);
        assert_eq!(nearest_vertex(&g2, Vec2::ZERO).unwrap(), 1);
        assert!(matches!(nearest_vertex(&PrmGraph::new(vec![]), Vec2::ZERO), Err(Error::EmptyGraph)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g3 = random_graph(&mut rng, 50, 0.0);
        for _ in 0..100 {
            let p = Vec2::new(rng.gen(), rng.gen());
            let oracle = (0..50)
                .min_by(|&a, &b| g3.vertices[a].dist(p).total_cmp(&g3.vertices[b].dist(p)))
                .unwrap();
            assert_eq!(nearest_vertex(&g3, p).unwrap(), oracle);
        }
    }

    #[test]
    fn shortest_path_small_cases() {
        let mut g = PrmGraph::new(vec![Vec2::ZERO; 3]);
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(1, 2, 1.0).unwrap();
        g.add_edge(0, 2, 3.0).unwrap();
        let p = shortest_path(&g, 0, 2).unwrap().unwrap();
        assert_eq!(p.vertices, vec![0, 1, 2]);
        assert_eq!(p.cost, 2.0);
        let same = shortest_path(&g, 1, 1).unwrap().unwrap();
        assert_eq!(same.vertices, vec![1]);
        assert_eq!(same.cost, 0.0);
        let mut disconnected = PrmGraph::new(vec![Vec2::ZERO; 2]);
        assert!(shortest_path(&disconnected, 0, 1).unwrap().is_none());
        disconnected.add_edge(0, 1, 0.5).unwrap();
        assert!(shortest_path(&disconnected, 0, 1).unwrap().is_some());
        assert!(shortest_path(&g, 0, 7).is_err());
    }

    #[test]
    fn tie_break_lexicographic() {
        // two equal-cost routes 0-2-3 and 0-1-3
        let mut g = PrmGraph::new(vec![Vec2::ZERO; 4]);
        g.add_edge(0, 2, 1.0).unwrap();
        g.add_edge(2, 3, 1.0).unwrap();
        g.add_edge(0, 1, 1.0).unwrap();
        g.add_edge(1, 3, 1.0).unwrap();
        assert_eq!(shortest_path(&g, 0, 3).unwrap().unwrap().vertices, vec![0, 1, 3]);
    }

    #[test]
    fn matches_bellman_ford() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=20);
            let p = rng.gen_range(0.1..0.6);
            let g = random_graph(&mut rng, n, p);
            let s = rng.gen_range(0..n);
            let oracle = bellman_ford(&g, s);
            for t in 0..n {
                match shortest_path(&g, s, t).unwrap() {
                    Some(p) => {
                        assert_eq!(p.cost, oracle[t]);
                        assert_eq!(p.vertices[0], s);
                        assert_eq!(*p.vertices.last().unwrap(), t);
                    }
                    None => assert!(oracle[t].is_infinite()),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn triangle_property(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 12, 0.3);
            let cost = |a, b| shortest_path(&g, a, b).unwrap().map_or(f64::INFINITY, |p| p.cost);
            for m in 0..12 {
                prop_assert!(cost(0, 11) <= cost(0, m) + cost(m, 11) + 1e-9);
            }
        }

        #[test]
        fn relabeling_preserves_cost(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            let g = random_graph(&mut rng, n, 0.35);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let mut h = PrmGraph::new(vec![Vec2::ZERO; n]);
            for (u, v, w) in g.edges() {
                h.add_edge(perm[u], perm[v], w).unwrap();
            }
            for t in 0..n {
                let a = shortest_path(&g, 0, t).unwrap().map(|p| p.cost);
                let b = shortest_path(&h, perm[0], perm[t]).unwrap().map(|p| p.cost);
                match (a, b) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0)),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn advance_plan_cases() {
        let mut plan = Plan::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(0.1, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 0.0),
        ]);
        assert_eq!(plan.advance(Vec2::new(5.0, 5.0), 0.15), Vec2::new(0.0, 0.0));
        assert_eq!(plan.advance(Vec2::new(0.05, 0.0), 0.15), Vec2::new(1.0, 0.0));
        assert_eq!(plan.cursor, 2);
        // the final waypoint is never skipped
        assert_eq!(plan.advance(Vec2::new(2.0, 0.0), 5.0), Vec2::new(2.0, 0.0));
        assert_eq!(plan.cursor, 3);
    }

    #[test]
    fn plan_route_appends_goal() {
        let w = World::empty(Rect::new(0.0, 0.0, 3.0, 3.0));
        let g = build_prm(&w, &PrmConfig { n_samples: 30, ..Default::default() }).unwrap();
        let goal = Vec2::new(2.9, 2.9);
        let plan = plan_route(&g, Vec2::new(0.1, 0.1), goal).unwrap().unwrap();
        assert_eq!(plan.final_goal(), goal);
        let v = g.vertices[5];
        let plan = plan_route(&g, Vec2::new(0.1, 0.1), v).unwrap().unwrap();
        assert_eq!(plan.final_goal(), v);
        assert!(plan.waypoints.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn graph_json_roundtrip() {
        let w = World::empty(Rect::new(0.0, 0.0, 3.0, 3.0));
        let g = build_prm(&w, &PrmConfig { n_samples: 10, ..Default::default() }).unwrap();
        let s = g.to_json();
        assert!(s.starts_with("{\"vertices\":[["));
        assert_eq!(PrmGraph::from_json(&s).unwrap(), g);
        assert!(PrmGraph::from_json(r#"{"vertices":[[0,0]],"edges":[[0,3,1.0]]}"#).is_err());
    }
}
