use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorldError;

pub const DEFAULT_CELL_SIZE: f64 = 0.25;
pub const MAX_ATTEMPTS: usize = 100;

pub type Rgb = [f32; 3];

/// Occupancy grid with a color for every wall cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrid {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub rng_seed: u64,
    walls: Vec<bool>,
    colors: Vec<Option<Rgb>>,
}

impl SceneGrid {
    /// Empty room of the given size: boundary walls only, all gray.
    pub fn empty_room(width: usize, height: usize, cell_size: f64) -> Self {
        let mut s = Self {
            scene_id: format!("room-{width}x{height}"),
            width,
            height,
            cell_size,
            rng_seed: 0,
            walls: vec![false; width * height],
            colors: vec![None; width * height],
        };
        for cy in 0..height {
            for cx in 0..width {
                if cx == 0 || cy == 0 || cx + 1 == width || cy + 1 == height {
                    s.set_wall(cx, cy, [0.5, 0.5, 0.5]);
                }
            }
        }
        s
    }

    pub fn index(&self, cx: usize, cy: usize) -> usize {
        cy * self.width + cx
    }

    pub fn is_wall(&self, cx: usize, cy: usize) -> bool {
        self.walls[self.index(cx, cy)]
    }

    /// Wall test that treats everything outside the grid as wall.
    pub fn is_wall_i(&self, cx: i64, cy: i64) -> bool {
        if cx < 0 || cy < 0 || cx >= self.width as i64 || cy >= self.height as i64 {
            return true;
        }
        self.is_wall(cx as usize, cy as usize)
    }

    pub fn color(&self, cx: usize, cy: usize) -> Option<Rgb> {
        self.colors[self.index(cx, cy)]
    }

    pub fn set_wall(&mut self, cx: usize, cy: usize, color: Rgb) {
        let i = self.index(cx, cy);
        self.walls[i] = true;
        self.colors[i] = Some(color);
    }

    pub fn clear(&mut self, cx: usize, cy: usize) {
        let i = self.index(cx, cy);
        self.walls[i] = false;
        self.colors[i] = None;
    }

    /// Cell containing a point, or `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let cx = (x / self.cell_size).floor();
        let cy = (y / self.cell_size).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return None;
        }
        Some((cx as usize, cy as usize))
    }

    pub fn is_free_point(&self, x: f64, y: f64) -> bool {
        matches!(self.cell_of(x, y), Some((cx, cy)) if !self.is_wall(cx, cy))
    }

    pub fn cell_center(&self, cx: usize, cy: usize) -> (f64, f64) {
        ((cx as f64 + 0.5) * self.cell_size, (cy as f64 + 0.5) * self.cell_size)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|cy| (0..self.width).map(move |cx| (cx, cy)))
            .filter(|&(cx, cy)| !self.is_wall(cx, cy))
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.walls.iter().filter(|w| !**w).count()
    }

    /// 4-connected flood fill from `start`; returns the number of cells reached.
    pub fn flood_fill_count(&self, start: (usize, usize)) -> usize {
        if self.is_wall(start.0, start.1) {
            return 0;
        }
        let mut seen = vec![false; self.walls.len()];
        let mut queue = VecDeque::from([start]);
        seen[self.index(start.0, start.1)] = true;
        let mut count = 0;
        while let Some((cx, cy)) = queue.pop_front() {
            count += 1;
            let neighbors = [(cx.wrapping_sub(1), cy), (cx + 1, cy), (cx, cy.wrapping_sub(1)), (cx, cy + 1)];
            for (nx, ny) in neighbors {
                if nx < self.width && ny < self.height && !self.is_wall(nx, ny) {
                    let i = self.index(nx, ny);
                    if !seen[i] {
                        seen[i] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        match self.free_cells().first() {
            Some(&start) => self.flood_fill_count(start) == self.free_count(),
            None => false,
        }
    }

    /// Checks the structural invariants: closed boundary, colored walls,
    /// single connected free region.
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.walls.len() != self.width * self.height || self.colors.len() != self.walls.len() {
            return Err(WorldError::InvalidScene("grid size mismatch".into()));
        }
        for cy in 0..self.height {
            for cx in 0..self.width {
                let edge = cx == 0 || cy == 0 || cx + 1 == self.width || cy + 1 == self.height;
                if edge && !self.is_wall(cx, cy) {
                    return Err(WorldError::InvalidScene(format!("boundary cell ({cx}, {cy}) is free")));
                }
                if self.is_wall(cx, cy) != self.color(cx, cy).is_some() {
                    return Err(WorldError::InvalidScene(format!("cell ({cx}, {cy}) wall/color mismatch")));
                }
            }
        }
        if !self.is_connected() {
            return Err(WorldError::InvalidScene("free space is not connected".into()));
        }
        Ok(())
    }

    pub fn to_file(&self) -> SceneFile {
        let occupancy = self.walls.iter().map(|&w| if w { '#' } else { '.' }).collect();
        let wall_colors =
            self.colors.iter().enumerate().filter_map(|(i, c)| c.map(|c| WallColor { cell: i, rgb: c })).collect();
        SceneFile {
            scene_id: self.scene_id.clone(),
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            seed: self.rng_seed,
            occupancy,
            wall_colors,
        }
    }

    pub fn from_file(file: SceneFile) -> Result<Self, WorldError> {
        let n = file.width * file.height;
        if file.occupancy.chars().count() != n {
            return Err(WorldError::InvalidScene(format!(
                "occupancy has {} cells, expected {n}",
                file.occupancy.chars().count()
            )));
        }
        let mut walls = Vec::with_capacity(n);
        for ch in file.occupancy.chars() {
            walls.push(match ch {
                '#' => true,
                '.' => false,
                other => return Err(WorldError::InvalidScene(format!("bad occupancy symbol {other:?}"))),
            });
        }
        let mut colors = vec![None; n];
        for wc in file.wall_colors {
            if wc.cell >= n {
                return Err(WorldError::InvalidScene(format!("color for cell {} outside grid", wc.cell)));
            }
            colors[wc.cell] = Some(wc.rgb);
        }
        let scene = Self {
            scene_id: file.scene_id,
            width: file.width,
            height: file.height,
            cell_size: file.cell_size,
            rng_seed: file.seed,
            walls,
            colors,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

/// On-disk scene record: dimensions, row-major occupancy string
/// (`#` wall, `.` free), wall-color table and generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub seed: u64,
    pub occupancy: String,
    pub wall_colors: Vec<WallColor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallColor {
    pub cell: usize,
    pub rgb: Rgb,
}

fn random_color(rng: &mut impl Rng) -> Rgb {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// Perimeter cells in clockwise order starting at the top-left corner.
fn perimeter(width: usize, height: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for cx in 0..width {
        cells.push((cx, 0));
    }
    for cy in 1..height {
        cells.push((width - 1, cy));
    }
    for cx in (0..width - 1).rev() {
        cells.push((cx, height - 1));
    }
    for cy in (1..height - 1).rev() {
        cells.push((0, cy));
    }
    cells
}

/// Procedural square scene: colored boundary segments plus axis-aligned
/// interior wall segments until `wall_density` of the interior is wall.
/// Segments that would disconnect the free space are skipped.
pub fn generate_scene(seed: u64, size: usize, wall_density: f64) -> Result<SceneGrid, WorldError> {
    if size < 8 {
        return Err(WorldError::InvalidParameter(format!("scene size {size} < 8")));
    }
    if !(0.0..=0.4).contains(&wall_density) {
        return Err(WorldError::InvalidParameter(format!("wall density {wall_density} outside [0, 0.4]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior = (size - 2) * (size - 2);
    let target = (wall_density * interior as f64).round() as usize;
    for _ in 0..MAX_ATTEMPTS {
        let mut scene = SceneGrid::empty_room(size, size, DEFAULT_CELL_SIZE);
        scene.scene_id = format!("scene-{seed}");
        scene.rng_seed = seed;

        let ring = perimeter(size, size);
        let mut i = 0;
        while i < ring.len() {
            let len = rng.random_range(2..=4usize);
            let color = random_color(&mut rng);
            for &(cx, cy) in ring.iter().skip(i).take(len) {
                scene.set_wall(cx, cy, color);
            }
            i += len;
        }

        let mut placed = 0;
        let mut tries = 0;
        while placed < target && tries < 60 * size {
            tries += 1;
            let horizontal = rng.random_bool(0.5);
            let len = rng.random_range(2..=(size / 3).max(2));
            let cx0 = rng.random_range(1..size - 1);
            let cy0 = rng.random_range(1..size - 1);
            let color = random_color(&mut rng);
            let cells: Vec<(usize, usize)> = (0..len)
                .map(|k| if horizontal { (cx0 + k, cy0) } else { (cx0, cy0 + k) })
                .filter(|&(cx, cy)| cx < size - 1 && cy < size - 1 && !scene.is_wall(cx, cy))
                .collect();
            if cells.is_empty() || scene.free_count() <= cells.len() + 1 {
                continue;
            }
            for &(cx, cy) in &cells {
                scene.set_wall(cx, cy, color);
            }
            if scene.is_connected() {
                placed += cells.len();
            } else {
                for &(cx, cy) in &cells {
                    scene.clear(cx, cy);
                }
            }
        }
        if placed >= target && scene.is_connected() {
            return Ok(scene);
        }
    }
    Err(WorldError::Unsatisfiable { seed, size, wall_density })
}
