//! Software rasterizer for overhead views of a [`WorldState`].
//!
//! Pixel membership is decided by a center test with no anti-aliasing. The
//! image covers the whole frame; row 0 is the top edge (`y = +extent`).

use std::f64::consts::PI;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worldsim::{Vec2, WorldState};

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [16, 32, 64];
pub const LIGHT_RANGE: [f64; 2] = [0.5, 1.5];
pub const NOISE_STD_RANGE: [f64; 2] = [0.0, 0.05];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("unsupported resolution {0} (expected one of 16, 32, 64)")]
    Resolution(usize),
    #[error("domain has {textures} body textures but the state has {bodies} bodies")]
    TextureCount { textures: usize, bodies: usize },
    #[error("texture family pool is empty")]
    EmptyPool,
    #[error("holdout count {holdout} must be smaller than the family count {total}")]
    Holdout { holdout: usize, total: usize },
    #[error("invalid domain parameters: {0}")]
    InvalidDomain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TextureFamily {
    Solid,
    HStripes,
    DStripes,
    Checker,
    Dots,
    Rings,
    Gradient,
    ValueNoise,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 8] = [
        TextureFamily::Solid,
        TextureFamily::HStripes,
        TextureFamily::DStripes,
        TextureFamily::Checker,
        TextureFamily::Dots,
        TextureFamily::Rings,
        TextureFamily::Gradient,
        TextureFamily::ValueNoise,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct TextureSpec {
    pub family: TextureFamily,
    /// Frequency, phase, rotation and contrast, each in [0, 1].
    pub params: [f64; 4],
    pub palette: [Rgb; 2],
}

impl TextureSpec {
    pub fn solid(color: Rgb) -> Self {
        Self {
            family: TextureFamily::Solid,
            params: [0.0; 4],
            palette: [color, color],
        }
    }

    fn validate(&self) -> Result<(), RenderError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.params.iter().all(|&p| unit(p)) && self.palette.iter().flatten().all(|&c| unit(c)) {
            Ok(())
        } else {
            Err(RenderError::InvalidDomain(
                "texture params and palette channels must lie in [0, 1]".into(),
            ))
        }
    }

    /// Color at local coordinates `(u, v)` in meters.
    pub fn color_at(&self, u: f64, v: f64) -> Rgb {
        let t = self.pattern(u, v);
        let [c0, c1] = self.palette;
        [
            c0[0] + (c1[0] - c0[0]) * t,
            c0[1] + (c1[1] - c0[1]) * t,
            c0[2] + (c1[2] - c0[2]) * t,
        ]
    }

    /// Blend weight toward the second palette color, in [0, 1].
    fn pattern(&self, u: f64, v: f64) -> f64 {
        let [p_freq, phase, p_rot, p_mix] = self.params;
        // cycles per meter
        let freq = 0.5 + 3.5 * p_freq;
        let contrast = 0.3 + 0.7 * p_mix;
        let angle = PI * p_rot;
        let (s, c) = angle.sin_cos();
        let ru = u * c + v * s;
        let rv = -u * s + v * c;
        let wave = |x: f64| 0.5 + 0.5 * (2.0 * PI * (freq * x + phase)).sin();
        let raw = match self.family {
            TextureFamily::Solid => 0.0,
            TextureFamily::HStripes => wave(v),
            TextureFamily::DStripes => {
                let (s, c) = (PI / 4.0 + 0.5 * angle).sin_cos();
                wave(u * c + v * s)
            }
            TextureFamily::Checker => {
                let a = (freq * ru + phase).floor() as i64;
                let b = (freq * rv + phase).floor() as i64;
                ((a + b).rem_euclid(2)) as f64
            }
            TextureFamily::Dots => {
                let fu = (freq * ru + phase).rem_euclid(1.0) - 0.5;
                let fv = (freq * rv + phase).rem_euclid(1.0) - 0.5;
                if fu * fu + fv * fv < 0.09 {
                    1.0
                } else {
                    0.0
                }
            }
            TextureFamily::Rings => wave((u * u + v * v).sqrt()),
            TextureFamily::Gradient => {
                let slope = 0.25 + 0.75 * p_freq;
                (0.5 + 0.5 * (ru * slope + (2.0 * phase - 1.0) * 0.5)).clamp(0.0, 1.0)
            }
            TextureFamily::ValueNoise => value_noise(freq * ru, freq * rv, phase.to_bits()),
        };
        raw * contrast
    }
}

fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for k in [ix as u64, iy as u64] {
        h ^= k.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(27).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice_hash(ix, iy, seed);
    let v10 = lattice_hash(ix + 1, iy, seed);
    let v01 = lattice_hash(ix, iy + 1, seed);
    let v11 = lattice_hash(ix + 1, iy + 1, seed);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

/// The irrelevant visual properties of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainParams {
    pub background: TextureSpec,
    pub body_textures: Vec<TextureSpec>,
    /// Multiplicative light level in [0.5, 1.5].
    pub light: f64,
    /// Standard deviation of additive Gaussian pixel noise, in [0, 0.05].
    pub pixel_noise_std: f64,
    pub noise_seed: u64,
}

impl DomainParams {
    pub fn validate(&self) -> Result<(), RenderError> {
        self.background.validate()?;
        for t in &self.body_textures {
            t.validate()?;
        }
        if !(LIGHT_RANGE[0]..=LIGHT_RANGE[1]).contains(&self.light) {
            return Err(RenderError::InvalidDomain(format!("light {} out of range", self.light)));
        }
        if !(NOISE_STD_RANGE[0]..=NOISE_STD_RANGE[1]).contains(&self.pixel_noise_std) {
            return Err(RenderError::InvalidDomain(format!(
                "pixel noise {} out of range",
                self.pixel_noise_std
            )));
        }
        Ok(())
    }
}

/// An H×W×3 image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub resolution: usize,
    pub pixels: Vec<f64>,
}

impl Observation {
    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.resolution + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary PPM (P6, 8-bit).
    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.resolution, self.resolution)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.write_all(&bytes)
    }
}

/// Object-pixel mask: true where a pixel center lies inside any body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub resolution: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn check_resolution(resolution: usize) -> Result<(), RenderError> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(RenderError::Resolution(resolution))
    }
}

fn pixel_center(extent: f64, resolution: usize, row: usize, col: usize) -> Vec2 {
    let cell = 2.0 * extent / resolution as f64;
    Vec2::new(
        -extent + (col as f64 + 0.5) * cell,
        extent - (row as f64 + 0.5) * cell,
    )
}

pub fn render(state: &WorldState, domain: &DomainParams, resolution: usize) -> Result<Observation, RenderError> {
    check_resolution(resolution)?;
    if domain.body_textures.len() != state.bodies.len() {
        return Err(RenderError::TextureCount {
            textures: domain.body_textures.len(),
            bodies: state.bodies.len(),
        });
    }
    let mut pixels = Vec::with_capacity(resolution * resolution * 3);
    for row in 0..resolution {
        for col in 0..resolution {
            let p = pixel_center(state.frame_half_extent, resolution, row, col);
            // later bodies are drawn on top
            let color = state
                .bodies
                .iter()
                .zip(&domain.body_textures)
                .rev()
                .find(|(b, _)| b.contains(p))
                .map(|(b, tex)| {
                    let local = p - b.position;
                    tex.color_at(local.x, local.y)
                })
                .unwrap_or_else(|| domain.background.color_at(p.x, p.y));
            pixels.extend(color.iter().map(|c| c * domain.light));
        }
    }
    if domain.pixel_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(domain.noise_seed);
        for v in pixels.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += domain.pixel_noise_std * z;
        }
    }
    for v in pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Observation { resolution, pixels })
}

pub fn render_mask(state: &WorldState, resolution: usize) -> Result<Mask, RenderError> {
    check_resolution(resolution)?;
    let mut bits = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let p = pixel_center(state.frame_half_extent, resolution, row, col);
            bits.push(state.bodies.iter().any(|b| b.contains(p)));
        }
    }
    Ok(Mask { resolution, bits })
}

fn sample_texture<R: Rng + ?Sized>(rng: &mut R, pool: &[TextureFamily]) -> TextureSpec {
    let family = pool[rng.random_range(0..pool.len())];
    let mut params = [0.0; 4];
    for p in params.iter_mut() {
        *p = rng.random::<f64>();
    }
    let mut palette = [[0.0; 3]; 2];
    for c in palette.iter_mut().flatten() {
        *c = rng.random::<f64>();
    }
    TextureSpec {
        family,
        params,
        palette,
    }
}

/// Draws a domain with every texture family taken uniformly from `pool`.
pub fn sample_domain<R: Rng + ?Sized>(
    rng: &mut R,
    pool: &[TextureFamily],
    body_count: usize,
) -> Result<DomainParams, RenderError> {
    if pool.is_empty() {
        return Err(RenderError::EmptyPool);
    }
    let background = sample_texture(rng, pool);
    let body_textures = (0..body_count).map(|_| sample_texture(rng, pool)).collect();
    let light = rng.random_range(LIGHT_RANGE[0]..LIGHT_RANGE[1]);
    let pixel_noise_std = rng.random_range(NOISE_STD_RANGE[0]..NOISE_STD_RANGE[1]);
    let noise_seed = rng.random::<u64>();
    Ok(DomainParams {
        background,
        body_textures,
        light,
        pixel_noise_std,
        noise_seed,
    })
}

/// Splits families into a training pool and `holdout` out-of-distribution families.
pub fn split_families(
    families: &[TextureFamily],
    holdout: usize,
    split_seed: u64,
) -> Result<(Vec<TextureFamily>, Vec<TextureFamily>), RenderError> {
    if holdout >= families.len() {
        return Err(RenderError::Holdout {
            holdout,
            total: families.len(),
        });
    }
    let mut shuffled = families.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let mut ood = shuffled.split_off(families.len() - holdout);
    shuffled.sort();
    ood.sort();
    Ok((shuffled, ood))
}
