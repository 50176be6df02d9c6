//! Obstacle fields, collision truth, simulated lidar and robot-centred
//! occupancy windows.
//!
//! Obstacles are closed axis-aligned rectangles. The robot footprint is a
//! disc; everything outside `bounds` counts as occupied.

use crate::error::{Error, Result};
use crate::geometry::{oriented_square_intersects_rect, Pose2, Rect, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Side of the occupancy grid in cells.
pub const GRID: usize = 25;
/// Index of the cell that contains the robot.
pub const GRID_CENTER: usize = GRID / 2;
pub const GRID_CELLS: usize = GRID * GRID;
/// Number of floats in an occupancy map (two channels).
pub const OCC_LEN: usize = 2 * GRID_CELLS;

pub const DEFAULT_RAYS: usize = 72;
pub const DEFAULT_MAX_RANGE: f64 = 1.0;
pub const DEFAULT_WINDOW_SIDE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bounds: Rect,
    pub obstacles: Vec<Rect>,
    #[serde(default)]
    pub seed: u64,
}

impl World {
    pub fn new(bounds: Rect, obstacles: Vec<Rect>, seed: u64) -> Result<Self> {
        let w = Self {
            bounds,
            obstacles,
            seed,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn empty(bounds: Rect) -> Self {
        Self {
            bounds,
            obstacles: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bounds.is_ordered() {
            return Err(Error::InvalidWorld("bounds min exceeds max".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.is_ordered() {
                return Err(Error::InvalidWorld(format!(
                    "obstacle {i} has min corner above max corner"
                )));
            }
            if !o.intersects(&self.bounds) {
                return Err(Error::InvalidWorld(format!("obstacle {i} lies outside bounds")));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("world serializes")
    }

    /// True iff the disc of `radius` at `p` lies within bounds and touches no obstacle.
    pub fn point_free(&self, p: Vec2, radius: f64) -> bool {
        debug_assert!(radius >= 0.0);
        let b = &self.bounds;
        if p.x - radius < b.min.x
            || p.x + radius > b.max.x
            || p.y - radius < b.min.y
            || p.y + radius > b.max.y
        {
            return false;
        }
        self.obstacles.iter().all(|o| o.distance(p) > radius)
    }

    /// Checks `point_free` at samples no more than `step` apart along `[a, b]`,
    /// both endpoints included.
    pub fn segment_free(&self, a: Vec2, b: Vec2, radius: f64, step: f64) -> bool {
        assert!(step > 0.0, "segment_free step must be positive");
        let n = (a.dist(b) / step).ceil().max(1.0) as usize;
        (0..=n).all(|i| self.point_free(a.lerp(b, i as f64 / n as f64), radius))
    }

    /// Distance along a world-frame ray to the first obstacle or bounds wall.
    fn ray_distance(&self, origin: Vec2, dir: Vec2) -> f64 {
        let mut t = if self.bounds.contains(origin) {
            self.bounds.ray_exit(origin, dir)
        } else {
            0.0
        };
        for o in &self.obstacles {
            if let Some(hit) = o.ray_entry(origin, dir) {
                t = t.min(hit);
            }
        }
        t
    }

    pub fn raycast(&self, pose: Pose2, n_rays: usize, max_range: f64) -> LidarScan {
        assert!(n_rays > 0 && max_range > 0.0);
        let origin = pose.position();
        let ranges = (0..n_rays)
            .map(|i| {
                let a = pose.psi + LidarScan::ray_angle(i, n_rays);
                let d = self.ray_distance(origin, Vec2::new(a.cos(), a.sin()));
                d.clamp(f64::MIN_POSITIVE, max_range)
            })
            .collect();
        LidarScan { ranges, max_range }
    }

    /// Occupancy window computed from exact geometry: a cell is occupied iff
    /// its footprint touches an obstacle or leaves the bounds.
    pub fn occupancy_window(&self, pose: Pose2, goal: Vec2, window_side: f64) -> OccupancyMap {
        assert!(window_side > 0.0);
        let mut map = OccupancyMap::new(pose, window_side);
        let cs = map.cell_size();
        let half = cs / 2.0;
        for r in 0..GRID {
            for c in 0..GRID {
                let center = pose.to_world(OccupancyMap::cell_center_local(r, c, cs));
                let inside = {
                    let (s, co) = pose.psi.sin_cos();
                    let ax = Vec2::new(co, s) * half;
                    let ay = Vec2::new(-s, co) * half;
                    [ax + ay, ax - ay, ay - ax, Vec2::ZERO - ax - ay]
                        .iter()
                        .all(|d| self.bounds.contains(center + *d))
                };
                let hit = !inside
                    || self
                        .obstacles
                        .iter()
                        .any(|o| oriented_square_intersects_rect(center, half, pose.psi, o));
                if hit {
                    map.cells[r * GRID + c] = 1.0;
                }
            }
        }
        map.set_goal(goal);
        map
    }

    pub fn translate(&self, d: Vec2) -> World {
        World {
            bounds: self.bounds.translate(d),
            obstacles: self.obstacles.iter().map(|o| o.translate(d)).collect(),
            seed: self.seed,
        }
    }
}

/// Range readings for rays spread uniformly over [0, 2pi) in the robot frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub ranges: Vec<f64>,
    pub max_range: f64,
}

impl LidarScan {
    pub fn ray_angle(i: usize, n: usize) -> f64 {
        2.0 * PI * i as f64 / n as f64
    }

    /// Robot-frame endpoints of rays that hit something before `max_range`.
    pub fn hit_points(&self) -> impl Iterator<Item = Vec2> + '_ {
        let n = self.ranges.len();
        self.ranges.iter().enumerate().filter_map(move |(i, &r)| {
            if r < self.max_range {
                let a = Self::ray_angle(i, n);
                Some(Vec2::new(a.cos(), a.sin()) * r)
            } else {
                None
            }
        })
    }

    /// Project the scan into a heading-aligned occupancy window.
    pub fn occupancy_window(&self, pose: Pose2, goal: Vec2, window_side: f64) -> OccupancyMap {
        assert!(window_side > 0.0);
        let mut map = OccupancyMap::new(pose, window_side);
        let cs = map.cell_size();
        for p in self.hit_points() {
            if let Some((r, c)) = OccupancyMap::local_to_cell(p, cs) {
                map.cells[r * GRID + c] = 1.0;
            }
        }
        map.set_goal(goal);
        map
    }
}

/// Two-channel 25x25 grid centred on the robot and aligned with its heading.
///
/// Row `r` runs along the robot's forward axis and column `c` along its left
/// axis; cell (12, 12) contains the robot. Channel 0 holds obstacles, channel 1
/// marks the goal cell when the goal falls inside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    pub cells: Vec<f32>,
    pub window_side: f64,
    pub center_pose: Pose2,
}

impl OccupancyMap {
    fn new(center_pose: Pose2, window_side: f64) -> Self {
        Self {
            cells: vec![0.0; OCC_LEN],
            window_side,
            center_pose,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.window_side / GRID as f64
    }

    pub fn cell_center_local(r: usize, c: usize, cs: f64) -> Vec2 {
        Vec2::new(
            (r as f64 - GRID_CENTER as f64) * cs,
            (c as f64 - GRID_CENTER as f64) * cs,
        )
    }

    pub fn local_to_cell(p: Vec2, cs: f64) -> Option<(usize, usize)> {
        let r = (p.x / cs + GRID_CENTER as f64 + 0.5).floor();
        let c = (p.y / cs + GRID_CENTER as f64 + 0.5).floor();
        let lim = GRID as f64;
        if (0.0..lim).contains(&r) && (0.0..lim).contains(&c) {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    fn set_goal(&mut self, goal: Vec2) {
        let local = self.center_pose.to_local(goal);
        if let Some((r, c)) = Self::local_to_cell(local, self.cell_size()) {
            self.cells[GRID_CELLS + r * GRID + c] = 1.0;
        }
    }

    pub fn obstacle(&self, r: usize, c: usize) -> f32 {
        self.cells[r * GRID + c]
    }

    pub fn goal(&self, r: usize, c: usize) -> f32 {
        self.cells[GRID_CELLS + r * GRID + c]
    }

    /// Run lengths of alternating zero/one runs, starting with zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        rle_encode(&self.cells)
    }
}

pub fn rle_encode(cells: &[f32]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0.0f32;
    let mut len = 0u32;
    for &v in cells {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], out: &mut [f32]) -> Result<()> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != out.len() as u64 {
        return Err(Error::Format(format!(
            "run lengths sum to {total}, expected {}",
            out.len()
        )));
    }
    let mut i = 0;
    for (k, &r) in runs.iter().enumerate() {
        let v = (k % 2) as f32;
        out[i..i + r as usize].fill(v);
        i += r as usize;
    }
    Ok(())
}

/// Parameters for procedural cluttered worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTemplate {
    pub bounds: Rect,
    /// Inclusive range of obstacle counts.
    pub obstacle_count: [usize; 2],
    /// Inclusive range for each obstacle side length.
    pub width_range: [f64; 2],
    /// Points that obstacles must stay `keep_out_radius` away from.
    #[serde(default)]
    pub keep_out: Vec<Vec2>,
    #[serde(default)]
    pub keep_out_radius: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts_per_obstacle: usize,
}

fn default_attempts() -> usize {
    1000
}

impl WorldTemplate {
    /// The desk-scale cluttered family used for the differential-drive robot.
    pub fn cluttered() -> Self {
        Self {
            bounds: Rect::new(0.0, 0.0, 3.0, 3.0),
            obstacle_count: [4, 7],
            width_range: [0.15, 0.45],
            keep_out: Vec::new(),
            keep_out_radius: 0.0,
            max_attempts_per_obstacle: default_attempts(),
        }
    }

    pub fn randomize(&self, seed: u64) -> Result<World> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [cmin, cmax] = self.obstacle_count;
        let count = if cmax > cmin {
            rng.gen_range(cmin..=cmax)
        } else {
            cmin
        };
        let [wmin, wmax] = self.width_range;
        let b = &self.bounds;
        let mut obstacles = Vec::with_capacity(count);
        let mut attempts = 0;
        while obstacles.len() < count {
            if attempts >= self.max_attempts_per_obstacle * count.max(1) {
                return Err(Error::OverDense {
                    placed: obstacles.len(),
                    wanted: count,
                    attempts,
                });
            }
            attempts += 1;
            let w = if wmax > wmin { rng.gen_range(wmin..=wmax) } else { wmin };
            let h = if wmax > wmin { rng.gen_range(wmin..=wmax) } else { wmin };
            if w > b.width() || h > b.height() {
                continue;
            }
            let x0 = b.min.x + rng.gen::<f64>() * (b.width() - w);
            let y0 = b.min.y + rng.gen::<f64>() * (b.height() - h);
            let rect = Rect::new(x0, y0, x0 + w, y0 + h);
            if self
                .keep_out
                .iter()
                .any(|p| rect.distance(*p) < self.keep_out_radius)
            {
                continue;
            }
            obstacles.push(rect);
        }
        Ok(World {
            bounds: *b,
            obstacles,
            seed,
        })
    }
}

/// Source of worlds for collection and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldFamily {
    Cluttered(WorldTemplate),
    Maze {
        cols: usize,
        rows: usize,
        loop_fraction: f64,
        cell_size: f64,
    },
    Fixed {
        world: World,
    },
}

impl WorldFamily {
    pub fn maze() -> Self {
        WorldFamily::Maze {
            cols: 4,
            rows: 4,
            loop_fraction: 0.2,
            cell_size: 0.5,
        }
    }

    pub fn sample(&self, seed: u64) -> Result<World> {
        match self {
            WorldFamily::Cluttered(t) => t.randomize(seed),
            WorldFamily::Maze {
                cols,
                rows,
                loop_fraction,
                cell_size,
            } => parse_maze(&generate_maze(*cols, *rows, *loop_fraction, seed), *cell_size, seed),
            WorldFamily::Fixed { world } => Ok(world.clone()),
        }
    }

    /// Goal tolerance conventionally used with this family.
    pub fn success_eps(&self) -> f64 {
        match self {
            WorldFamily::Maze { .. } => 0.5,
            _ => 0.3,
        }
    }
}

/// Parse a maze grid: `#` is a wall cell, `.` is free. The first text row is
/// the top (largest y) of the world.
pub fn parse_maze(text: &str, cell_size: f64, seed: u64) -> Result<World> {
    let rows: Vec<&str> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .collect();
    if rows.is_empty() {
        return Err(Error::Format("empty maze".into()));
    }
    let width = rows[0].chars().count();
    let height = rows.len();
    let mut obstacles = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.chars().count() != width {
            return Err(Error::Format(format!("maze row {i} has ragged width")));
        }
        let y0 = (height - 1 - i) as f64 * cell_size;
        for (j, ch) in row.chars().enumerate() {
            match ch {
                '#' => {
                    let x0 = j as f64 * cell_size;
                    obstacles.push(Rect::new(x0, y0, x0 + cell_size, y0 + cell_size));
                }
                '.' => {}
                other => {
                    return Err(Error::Format(format!(
                        "unexpected maze character {other:?} in row {i}"
                    )))
                }
            }
        }
    }
    World::new(
        Rect::new(0.0, 0.0, width as f64 * cell_size, height as f64 * cell_size),
        obstacles,
        seed,
    )
}

/// Generate a maze of `cols x rows` rooms as ASCII (`2*cols+1` characters
/// wide). Depth-first carving followed by knocking out a fraction of the
/// remaining interior walls to create loops.
pub fn generate_maze(cols: usize, rows: usize, loop_fraction: f64, seed: u64) -> String {
    let (w, h) = (2 * cols + 1, 2 * rows + 1);
    let mut grid = vec![vec!['#'; w]; h];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited = vec![vec![false; cols]; rows];
    let mut stack = vec![(0usize, 0usize)];
    visited[0][0] = true;
    grid[1][1] = '.';
    while let Some(&(r, c)) = stack.last() {
        let mut next = Vec::with_capacity(4);
        if r > 0 && !visited[r - 1][c] {
            next.push((r - 1, c));
        }
        if r + 1 < rows && !visited[r + 1][c] {
            next.push((r + 1, c));
        }
        if c > 0 && !visited[r][c - 1] {
            next.push((r, c - 1));
        }
        if c + 1 < cols && !visited[r][c + 1] {
            next.push((r, c + 1));
        }
        if next.is_empty() {
            stack.pop();
            continue;
        }
        let (nr, nc) = next[rng.gen_range(0..next.len())];
        visited[nr][nc] = true;
        grid[2 * nr + 1][2 * nc + 1] = '.';
        grid[r + nr + 1][c + nc + 1] = '.';
        stack.push((nr, nc));
    }
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            // interior walls between two rooms
            let between_rows = i % 2 == 0 && j % 2 == 1;
            let between_cols = i % 2 == 1 && j % 2 == 0;
            if grid[i][j] == '#' && (between_rows || between_cols) && rng.gen::<f64>() < loop_fraction {
                grid[i][j] = '.';
            }
        }
    }
    grid.into_iter()
        .map(|row| row.into_iter().collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}
