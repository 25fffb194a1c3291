//! Layered random-texture stereograms with exact ground truth.
//!
//! A scene is a background plane plus fronto-parallel rectangles, each with
//! a constant disparity and its own texture pinned to left-image
//! coordinates. The left view shows, per pixel, the nearest layer covering
//! it; the right view samples every layer at `x + d`, so non-occluded pixels
//! satisfy `right(x − d) = left(x)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::StereoSample;
use crate::error::{Error, Result};
use crate::stereo::DisparityMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub disparity: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x as f64 && x < (self.x + self.w) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub rects: Vec<Rect>,
    pub texture_seed: u64,
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 1 {
            return Err(Error::usage(format!("scene {}×{} is too small", self.width, self.height)));
        }
        let bound = self.width as f64 / 4.0;
        let check = |d: f64, what: &str| {
            if d.is_finite() && d >= 0.0 && d < bound {
                Ok(())
            } else {
                Err(Error::usage(format!(
                    "{what} disparity {d} outside [0, {bound}) for width {}",
                    self.width
                )))
            }
        };
        check(self.background, "background")?;
        for (i, r) in self.rects.iter().enumerate() {
            check(r.disparity, &format!("rectangle {i}"))?;
            if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
                return Err(Error::usage(format!("rectangle {i} {r:?} leaves the frame")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::usage("noise sigma must be non-negative"));
        }
        Ok(())
    }

    fn layer_disparity(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.background
        } else {
            self.rects[layer - 1].disparity
        }
    }

    /// Nearest layer whose surface covers position `x` of row `y`, where each
    /// layer is shifted by `shift · d` (0 for the left view, −1 for the right).
    fn top_layer(&self, x: f64, y: usize, shift: f64) -> usize {
        let mut best = 0;
        for (i, r) in self.rects.iter().enumerate() {
            if r.contains(x - shift * r.disparity, y) && r.disparity >= self.layer_disparity(best) {
                best = i + 1;
            }
        }
        best
    }

    /// Parses `key=value` lines: `width`, `height`, `background`,
    /// `texture_seed`, `noise_sigma`, and repeated `rect=x y w h disparity`.
    /// Later rectangles are nearer. `#` starts a comment.
    pub fn parse(text: &str) -> Result<SceneSpec> {
        let mut spec = SceneSpec {
            width: 0,
            height: 0,
            background: 0.0,
            rects: Vec::new(),
            texture_seed: 0,
            noise_sigma: 0.0,
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse { position: n + 1, message: m };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected key=value, found {line:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{key}: {v:?} is not a number")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("{key}: {v:?} is not an integer")));
            match key {
                "width" => spec.width = int(value)?,
                "height" => spec.height = int(value)?,
                "background" => spec.background = num(value)?,
                "texture_seed" => {
                    spec.texture_seed = value.parse().map_err(|_| bad(format!("{key}: {value:?} is not an integer")))?
                }
                "noise_sigma" => spec.noise_sigma = num(value)?,
                "rect" => {
                    let f: Vec<&str> = value.split_whitespace().collect();
                    if f.len() != 5 {
                        return Err(bad("rect needs x y w h disparity".into()));
                    }
                    spec.rects.push(Rect {
                        x: int(f[0])?,
                        y: int(f[1])?,
                        w: int(f[2])?,
                        h: int(f[3])?,
                        disparity: num(f[4])?,
                    });
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Ground-truth disparity of the left view.
    pub fn disparity_at(&self, x: usize, y: usize) -> f64 {
        self.layer_disparity(self.top_layer(x as f64, y, 0.0))
    }
}

/// Box-smoothed uniform noise, three channels, quantised to 8-bit levels.
struct Texture {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Texture {
    fn new(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Texture {
        let raw: Vec<f64> = (0..3 * width * height).map(|_| rng.random::<f64>()).collect();
        let mut data = vec![0.0; raw.len()];
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let mut acc = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                            let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                            acc += raw[(c * height + yy) * width + xx];
                        }
                    }
                    data[(c * height + y) * width + x] = (acc / 9.0 * 255.0).round() / 255.0;
                }
            }
        }
        Texture { width, height, data }
    }

    /// Linear interpolation along `x`, clamped to the texture.
    fn sample(&self, c: usize, y: usize, x: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let t = x - x0 as f64;
        let row = &self.data[(c * self.height + y) * self.width..][..self.width];
        if t == 0.0 {
            row[x0]
        } else {
            row[x0] * (1.0 - t) + row[x1] * t
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(31) ^ b
}

/// Renders a scene. Textures come from `spec.texture_seed` and `seed`
/// together; noise is drawn after the views are synthesised.
pub fn generate_stereogram(spec: &SceneSpec, seed: u64) -> Result<StereoSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.texture_seed, seed));
    let max_d = spec
        .rects
        .iter()
        .map(|r| r.disparity)
        .fold(spec.background, f64::max);
    let tex_w = w + max_d.ceil() as usize + 2;
    let textures: Vec<Texture> = (0..=spec.rects.len())
        .map(|_| Texture::new(tex_w, h, &mut rng))
        .collect();

    let mut left = vec![0.0; 3 * h * w];
    let mut right = vec![0.0; 3 * h * w];
    let mut gt = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    let mut right_owner = vec![0usize; w];
    for y in 0..h {
        for (xr, owner) in right_owner.iter_mut().enumerate() {
            let layer = spec.top_layer(xr as f64, y, -1.0);
            *owner = layer;
            let d = spec.layer_disparity(layer);
            for c in 0..3 {
                right[(c * h + y) * w + xr] = textures[layer].sample(c, y, xr as f64 + d);
            }
        }
        for x in 0..w {
            let layer = spec.top_layer(x as f64, y, 0.0);
            let d = spec.layer_disparity(layer);
            gt[y * w + x] = d;
            for c in 0..3 {
                left[(c * h + y) * w + x] = textures[layer].sample(c, y, x as f64);
            }
            let xr = x as f64 - d;
            let (lo, hi) = (xr.floor(), xr.ceil());
            mask[y * w + x] = lo >= 0.0
                && right_owner[lo as usize] == layer
                && right_owner[hi as usize] == layer;
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in left.iter_mut().chain(right.iter_mut()) {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let gt = DisparityMap::new(Tensor::new([1, 1, h, w], gt)?, 0)?.with_mask(mask)?;
    Ok(StereoSample {
        id: String::new(),
        left: Tensor::new([1, 3, h, w], left)?,
        right: Tensor::new([1, 3, h, w], right)?,
        gt,
    })
}

/// Size and disparity range of generated desk-scale scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskPreset {
    pub width: usize,
    pub height: usize,
    pub max_disp: usize,
    pub max_rects: usize,
    pub noise_sigma: f64,
}

impl Default for DeskPreset {
    fn default() -> Self {
        DeskPreset {
            width: 128,
            height: 64,
            max_disp: 16,
            max_rects: 4,
            noise_sigma: 0.0,
        }
    }
}

impl DeskPreset {
    pub fn by_name(name: &str) -> Option<DeskPreset> {
        match name {
            "desk" => Some(DeskPreset::default()),
            "desk-noisy" => Some(DeskPreset {
                noise_sigma: 0.02,
                ..DeskPreset::default()
            }),
            "tiny" => Some(DeskPreset {
                width: 64,
                height: 64,
                max_disp: 8,
                max_rects: 3,
                noise_sigma: 0.0,
            }),
            _ => None,
        }
    }

    /// Random integer-disparity scene: a background plane in the lower
    /// quarter of the range and up to `max_rects` nearer rectangles.
    pub fn scene(&self, rng: &mut impl Rng) -> SceneSpec {
        let bg = rng.random_range(0..=self.max_disp / 4);
        let count = rng.random_range(1..=self.max_rects.max(1));
        let rects = (0..count)
            .map(|_| {
                let rw = rng.random_range(self.width / 10..=self.width * 3 / 8).max(2);
                let rh = rng.random_range(self.height / 8..=self.height / 2).max(2);
                Rect {
                    x: rng.random_range(0..=self.width - rw),
                    y: rng.random_range(0..=self.height - rh),
                    w: rw,
                    h: rh,
                    disparity: rng.random_range(bg + 1..=self.max_disp) as f64,
                }
            })
            .collect();
        SceneSpec {
            width: self.width,
            height: self.height,
            background: bg as f64,
            rects,
            texture_seed: rng.random(),
            noise_sigma: self.noise_sigma,
        }
    }

    /// `count` samples named `000000`, `000001`, …, reproducible from `seed`.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<StereoSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let scene = self.scene(&mut rng);
                let mut s = generate_stereogram(&scene, i as u64)?;
                s.id = format!("{i:06}");
                Ok(s)
            })
            .collect()
    }
}
