use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `s`.
    fn contains(&self, dx: f32, dy: f32, s: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= 0.85 * s && dy.abs() <= 0.85 * s,
            Shape::Triangle => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
            Shape::Cross => {
                let arm = s / 3.0;
                (dx.abs() <= arm && dy.abs() <= s) || (dy.abs() <= arm && dx.abs() <= s)
            }
        }
    }
}

/// Images with one shape each on a noisy background, plus the shape's pixel
/// support. The first 80% of indices form the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesDataset {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Row-major `height x width` shape support per image.
    pub masks: Vec<Vec<bool>>,
    pub train_len: usize,
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_len
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.train_len..self.len()
    }

    pub fn samples(&self, range: std::ops::Range<usize>) -> Vec<Sample> {
        range
            .map(|i| Sample {
                image: self.images[i].clone(),
                label: self.labels[i],
            })
            .collect()
    }

    pub fn train(&self) -> Vec<Sample> {
        self.samples(self.train_indices())
    }

    pub fn test(&self) -> Vec<Sample> {
        self.samples(self.test_indices())
    }
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Deterministic given `seed`. Labels cycle through the first `classes`
/// shapes so both splits stay balanced.
pub fn generate_shapes_dataset(
    n: usize,
    width: usize,
    height: usize,
    classes: usize,
    seed: u64,
) -> Result<ShapesDataset> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 images, got {n}")));
    }
    if width < 16 || height < 16 {
        return Err(Error::InvalidArgument(format!("images must be at least 16x16, got {width}x{height}")));
    }
    if !(2..=Shape::ALL.len()).contains(&classes) {
        return Err(Error::InvalidArgument(format!("classes must be in [2, 4], got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = width * height;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let side = width.min(height) as f32;
    for i in 0..n {
        let label = i % classes;
        let shape = Shape::ALL[label];
        let s = rng.gen_range(0.18..0.30) * side;
        let cx = rng.gen_range(s + 1.0..width as f32 - s - 1.0);
        let cy = rng.gen_range(s + 1.0..height as f32 - s - 1.0);
        let bg: [f32; 3] = [rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.2)];
        let fg = loop {
            let c = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
            if color_distance(c, bg) >= 0.35 {
                break c;
            }
        };
        let mut data = vec![0.0f32; 3 * plane];
        let mut mask = vec![false; plane];
        for y in 0..height {
            for x in 0..width {
                let inside = shape.contains(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, s);
                mask[y * width + x] = inside;
                for c in 0..3 {
                    let noise = rng.gen_range(-0.05..0.05);
                    let base = if inside { fg[c] } else { bg[c] };
                    data[c * plane + y * width + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        images.push(Tensor::new(vec![3, height, width], data)?);
        labels.push(label);
        masks.push(mask);
    }
    Ok(ShapesDataset {
        width,
        height,
        classes,
        images,
        labels,
        masks,
        train_len: n * 4 / 5,
    })
}

const PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.2, 0.9],
    [0.95, 0.9, 0.1],
    [0.9, 0.2, 0.9],
    [0.1, 0.9, 0.9],
    [0.95, 0.95, 0.95],
    [0.1, 0.1, 0.1],
];

/// An image tiled by four axis-aligned rectangles of distinct palette
/// colours, split at a random interior point. Returns the image and the four
/// region masks (top-left, top-right, bottom-left, bottom-right).
pub fn four_rectangles(width: usize, height: usize, seed: u64) -> Result<(Tensor, Vec<Vec<bool>>)> {
    if width < 8 || height < 8 {
        return Err(Error::InvalidArgument("four_rectangles needs at least 8x8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sx = rng.gen_range(width / 4..=3 * width / 4);
    let sy = rng.gen_range(height / 4..=3 * height / 4);
    let mut colors = PALETTE.to_vec();
    colors.shuffle(&mut rng);
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    let mut masks = vec![vec![false; plane]; 4];
    for y in 0..height {
        for x in 0..width {
            let region = (y >= sy) as usize * 2 + (x >= sx) as usize;
            masks[region][y * width + x] = true;
            for c in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                data[c * plane + y * width + x] = (colors[region][c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok((Tensor::new(vec![3, height, width], data)?, masks))
}
