//! Synthetic segmentation scenes: circles, rectangles and triangles on a
//! flat background.

use cednet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Background plus the three shape classes.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

impl ShapeKind {
    pub fn class(self) -> usize {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Rect => 2,
            ShapeKind::Triangle => 3,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.9, 0.25, 0.2],
            ShapeKind::Rect => [0.25, 0.85, 0.3],
            ShapeKind::Triangle => [0.3, 0.35, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Subsamples per pixel axis used for anti-aliasing.
    pub supersample: usize,
    /// Uniform jitter added to each class colour channel.
    pub color_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { min_shapes: 1, max_shapes: 3, min_size: 6.0, max_size: 16.0, supersample: 4, color_jitter: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Circle radius, rectangle half-extents, triangle circumradius.
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

impl ShapeInstance {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.rx * self.rx,
            ShapeKind::Rect => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Triangle => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = self.angle + k as f64 * std::f64::consts::TAU / 3.0;
                        (self.rx * a.cos(), self.rx * a.sin())
                    })
                    .collect();
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&d| d >= 0.0) || s.iter().all(|&d| d <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// (3, H, W), values in [0, 1].
    pub image: Tensor<f32>,
    /// Row-major class labels, one per pixel.
    pub mask: Vec<usize>,
    pub shapes: Vec<ShapeInstance>,
}

/// Renders one scene. Later shapes are painted over earlier ones; the image
/// is anti-aliased by supersampling while the mask labels pixel centres.
pub fn generate_scene(seed: u64, height: usize, width: usize, spec: &SceneSpec) -> Result<SyntheticScene> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::Invalid(format!("scene size {height}x{width} must be a positive multiple of 32")));
    }
    if spec.min_shapes > spec.max_shapes || spec.min_size <= 0.0 || spec.min_size > spec.max_size || spec.supersample == 0 {
        return Err(Error::Invalid(format!("inconsistent scene spec {spec:?}")));
    }
    if 2.0 * spec.max_size > height.min(width) as f64 {
        return Err(Error::Invalid(format!(
            "shapes of radius up to {} do not fit a {height}x{width} canvas",
            spec.max_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.35));
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<ShapeInstance> = (0..count)
        .map(|_| {
            let kind = [ShapeKind::Circle, ShapeKind::Rect, ShapeKind::Triangle][rng.gen_range(0..3)];
            let r = rng.gen_range(spec.min_size..=spec.max_size);
            let ry = if kind == ShapeKind::Rect { rng.gen_range(0.6 * r..=r) } else { r };
            let color = kind.base_color().map(|c| (c + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0));
            ShapeInstance {
                kind,
                cx: rng.gen_range(r..=width as f64 - r),
                cy: rng.gen_range(ry..=height as f64 - ry),
                rx: r,
                ry,
                angle: rng.gen_range(0.0..std::f64::consts::TAU),
                color,
            }
        })
        .collect();

    let plane = height * width;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![0usize; plane];
    let ss = spec.supersample;
    for y in 0..height {
        for x in 0..width {
            let mut px = background;
            for s in &shapes {
                let mut hits = 0;
                for i in 0..ss {
                    for j in 0..ss {
                        let sx = x as f64 + (j as f64 + 0.5) / ss as f64;
                        let sy = y as f64 + (i as f64 + 0.5) / ss as f64;
                        hits += usize::from(s.contains(sx, sy));
                    }
                }
                let cov = hits as f64 / (ss * ss) as f64;
                for c in 0..3 {
                    px[c] = s.color[c] * cov + px[c] * (1.0 - cov);
                }
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * width + x] = s.kind.class();
                }
            }
            for c in 0..3 {
                image[c * plane + y * width + x] = px[c] as f32;
            }
        }
    }
    Ok(SyntheticScene {
        seed,
        height,
        width,
        image: Tensor::from_vec(vec![3, height, width], image)?,
        mask,
        shapes,
    })
}

/// Fixed train/validation scene sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub height: usize,
    pub width: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    pub scene: SceneSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, train_scenes: 64, val_scenes: 16, seed: 0, scene: SceneSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Well-mixed per-scene seed so neighbouring indices and splits do not
/// share random streams.
pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x5452_4149_4e00_0000u64,
        Split::Val => 0x5641_4c00_0000_0000u64,
    };
    let mut z = base ^ tag ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DataSpec {
    pub fn scenes(&self, split: Split) -> Result<Vec<SyntheticScene>> {
        let n = match split {
            Split::Train => self.train_scenes,
            Split::Val => self.val_scenes,
        };
        (0..n)
            .map(|i| generate_scene(scene_seed(self.seed, split, i), self.height, self.width, &self.scene))
            .collect()
    }
}

/// Stacks scenes into an (N, 3, H, W) batch and flat labels.
pub fn make_batch(scenes: &[&SyntheticScene]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = scenes.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if scenes.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Invalid("scenes in a batch must share one size".into()));
    }
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec(vec![scenes.len(), 3, h, w], data)?, labels))
}
