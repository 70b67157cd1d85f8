//! Procedural 32×32 RGB shapes: a circle, square or triangle over a linear
//! colour-gradient background.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{rng_for, Purpose};

pub const IMAGE_SIZE: usize = 32;
pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn from_label(label: usize) -> Self {
        match label % 3 {
            0 => Shape::Circle,
            1 => Shape::Square,
            _ => Shape::Triangle,
        }
    }

    pub fn label(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    /// `[3, 32, 32]` images with values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

struct Scene {
    shape: Shape,
    cx: f64,
    cy: f64,
    /// Half-width of the bounding square.
    r: f64,
    /// Rotation of squares and triangles.
    angle: f64,
    fg: [f64; 3],
    bg0: [f64; 3],
    bg1: [f64; 3],
    dir: (f64, f64),
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl Scene {
    fn random(shape: Shape, rng: &mut impl Rng) -> Self {
        let size = IMAGE_SIZE as f64;
        let r = rng.random_range(0.17..0.3) * size;
        let cx = rng.random_range(r + 1.0..size - r - 1.0);
        let cy = rng.random_range(r + 1.0..size - r - 1.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let bg0 = color(rng);
        let bg1 = color(rng);
        let mut fg = color(rng);
        // keep the shape visible against both ends of the gradient
        for _ in 0..64 {
            if dist(fg, bg0) > 0.45 && dist(fg, bg1) > 0.45 {
                break;
            }
            fg = color(rng);
        }
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        Self { shape, cx, cy, r, angle, fg, bg0, bg1, dir: (theta.cos(), theta.sin()) }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => {
                let h = self.r * 0.85;
                u.abs() <= h && v.abs() <= h
            }
            Shape::Triangle => {
                // equilateral triangle inscribed in the circle of radius r
                (0..3).all(|k| {
                    let a = k as f64 * std::f64::consts::TAU / 3.0;
                    let (nx, ny) = (a.cos(), a.sin());
                    u * nx + v * ny <= self.r * 0.5
                })
            }
        }
    }

    fn render(&self) -> Tensor {
        let n = IMAGE_SIZE;
        let mut data = vec![0.0; 3 * n * n];
        let half = (n as f64 - 1.0) / 2.0;
        for py in 0..n {
            for px in 0..n {
                let mut cover = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        if self.inside(x, y) {
                            cover += 1.0;
                        }
                    }
                }
                let cover = cover / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let proj = ((px as f64 - half) * self.dir.0 + (py as f64 - half) * self.dir.1) / n as f64 + 0.5;
                let w = proj.clamp(0.0, 1.0);
                for ch in 0..3 {
                    let bg = self.bg0[ch] * (1.0 - w) + self.bg1[ch] * w;
                    data[(ch * n + py) * n + px] = cover * self.fg[ch] + (1.0 - cover) * bg;
                }
            }
        }
        Tensor::from_vec_unchecked(vec![3, n, n], data)
    }
}

/// `n` class-balanced images (labels cycle circle, square, triangle).
pub fn generate_dataset(n: usize, seed: u64) -> Result<ShapesDataset> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("dataset needs at least 3 images, got {n}")));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let shape = Shape::from_label(i);
        let mut rng = rng_for(seed, Purpose::Data, i as u64);
        images.push(Scene::random(shape, &mut rng).render());
        labels.push(shape.label());
    }
    Ok(ShapesDataset { images, labels, seed })
}

/// Image `i` of the dataset rooted at `seed`, without generating the rest.
pub fn dataset_image(i: usize, seed: u64) -> (Tensor, usize) {
    let shape = Shape::from_label(i);
    let mut rng = rng_for(seed, Purpose::Data, i as u64);
    (Scene::random(shape, &mut rng).render(), shape.label())
}

/// Dataset images to model space `[-1, 1]`.
pub fn to_model_space(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Model space back to `[0, 1]`, clamped.
pub fn to_unit_space(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}
