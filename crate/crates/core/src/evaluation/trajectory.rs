use std::path::Path;

use super::EvalError;
use crate::worldsim::{encode_ppm, Pose, SceneGrid};

const WALL: [f32; 3] = [0.15, 0.15, 0.15];
const FREE: [f32; 3] = [0.92, 0.92, 0.92];
const START: [f32; 3] = [0.0, 0.8, 0.0];
const GOAL: [f32; 3] = [0.9, 0.0, 0.0];
const PATH_DARK: [f32; 3] = [0.0, 0.0, 0.35];
const PATH_LIGHT: [f32; 3] = [0.55, 0.75, 1.0];

/// Top-down RGB image, row-major `[height x width x 3]`, row 0 at `y = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl TrajectoryImage {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.width, self.height, &self.pixels)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Blue shade for path pose `t` of `n`, brightening with `t`.
pub fn path_color(t: usize, n: usize) -> [f32; 3] {
    let f = if n <= 1 { 1.0 } else { (t - 1) as f32 / (n - 1) as f32 };
    std::array::from_fn(|c| PATH_DARK[c] + f * (PATH_LIGHT[c] - PATH_DARK[c]))
}

/// Draws walls, the path (poses `1..`, one pixel each, dark to light blue),
/// a green start pixel at pose 0 and a red goal pixel. Each grid cell
/// becomes `upscale x upscale` pixels.
pub fn render_trajectory(scene: &SceneGrid, trajectory: &[Pose], goal: &Pose, upscale: usize) -> TrajectoryImage {
    let upscale = upscale.max(1);
    let (width, height) = (scene.width * upscale, scene.height * upscale);
    let mut img = TrajectoryImage { width, height, pixels: vec![0.0; width * height * 3] };
    for row in 0..height {
        for col in 0..width {
            let c = if scene.is_wall(col / upscale, row / upscale) { WALL } else { FREE };
            img.set(row, col, c);
        }
    }
    let ppm = upscale as f64 / scene.cell_size;
    let to_px = |p: &Pose| {
        let col = ((p.x * ppm).floor().max(0.0) as usize).min(width - 1);
        let row = ((p.y * ppm).floor().max(0.0) as usize).min(height - 1);
        (row, col)
    };
    let n = trajectory.len().saturating_sub(1);
    for (t, p) in trajectory.iter().enumerate().skip(1) {
        let (r, c) = to_px(p);
        img.set(r, c, path_color(t, n));
    }
    if let Some(start) = trajectory.first() {
        let (r, c) = to_px(start);
        img.set(r, c, START);
    }
    let (r, c) = to_px(goal);
    img.set(r, c, GOAL);
    img
}
