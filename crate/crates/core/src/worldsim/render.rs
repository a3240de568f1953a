//! Column raycaster producing egocentric RGB observations.

use std::path::Path;

use super::camera::CameraParams;
use super::pose::Pose;
use super::scene::SceneGrid;
use super::WorldError;

pub const CEILING_GRAY: f32 = 0.8;
pub const FLOOR_GRAY: f32 = 0.2;
/// Virtual wall height in meters; sets the band height scale.
pub const WALL_HEIGHT: f64 = 0.5;

/// `[height x width x 3]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub step_index: u32,
}

impl Observation {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-major copy (`[3, H, W]`) for the encoder.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm(self.width, self.height, &self.pixels)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Binary PPM (P6) from `[h x w x 3]` floats in `[0, 1]`.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub cell: (usize, usize),
    pub distance: f64,
}

/// Grid traversal (Amanatides-Woo) from `(x, y)` along `angle` to the
/// first wall cell. Terminates because the boundary is closed.
pub fn cast_ray(scene: &SceneGrid, x: f64, y: f64, angle: f64) -> RayHit {
    let cs = scene.cell_size;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut cx = (x / cs).floor() as i64;
    let mut cy = (y / cs).floor() as i64;
    let (step_x, mut t_max_x, t_delta_x) = axis_setup(x, dx, cx, cs);
    let (step_y, mut t_max_y, t_delta_y) = axis_setup(y, dy, cy, cs);
    let mut t = 0.0;
    let limit = 2 * (scene.width + scene.height) + 4;
    for _ in 0..limit {
        if scene.is_wall_i(cx, cy) {
            break;
        }
        if t_max_x < t_max_y {
            cx += step_x;
            t = t_max_x;
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            t = t_max_y;
            t_max_y += t_delta_y;
        }
    }
    let cx = cx.clamp(0, scene.width as i64 - 1) as usize;
    let cy = cy.clamp(0, scene.height as i64 - 1) as usize;
    RayHit { cell: (cx, cy), distance: t }
}

fn axis_setup(pos: f64, dir: f64, cell: i64, cs: f64) -> (i64, f64, f64) {
    if dir > 0.0 {
        (1, ((cell + 1) as f64 * cs - pos) / dir, cs / dir)
    } else if dir < 0.0 {
        (-1, (cell as f64 * cs - pos) / dir, -cs / dir)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

/// World angle of image column `col`.
pub fn ray_angle(pose: &Pose, cam: &CameraParams, col: usize) -> f64 {
    let frac = col as f64 / (cam.n_rays - 1) as f64 - 0.5;
    pose.theta + cam.yaw_offset + cam.hfov * frac
}

/// Wall band height in pixels for a hit at `distance`, clamped to `[1, h_img]`.
pub fn band_height(distance: f64, cam: &CameraParams, h_img: usize) -> usize {
    let correction = (cam.hfov / 2.0).tan();
    let h = cam.v_scale * h_img as f64 * WALL_HEIGHT / (2.0 * distance * correction);
    if !h.is_finite() {
        return h_img;
    }
    (h.round() as usize).clamp(1, h_img)
}

pub fn render(scene: &SceneGrid, pose: &Pose, cam: &CameraParams, h_img: usize) -> Observation {
    let w = cam.n_rays;
    let mut pixels = vec![0.0f32; h_img * w * 3];
    for col in 0..w {
        let hit = cast_ray(scene, pose.x, pose.y, ray_angle(pose, cam, col));
        let color = scene.color(hit.cell.0, hit.cell.1).unwrap_or([0.0; 3]);
        let band = band_height(hit.distance, cam, h_img);
        let top = (h_img - band) / 2;
        for row in 0..h_img {
            let px = if row < top {
                [CEILING_GRAY; 3]
            } else if row < top + band {
                color
            } else {
                [FLOOR_GRAY; 3]
            };
            let i = (row * w + col) * 3;
            pixels[i..i + 3].copy_from_slice(&px);
        }
    }
    Observation { height: h_img, width: w, pixels, step_index: 0 }
}
