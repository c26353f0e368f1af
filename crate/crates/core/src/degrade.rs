//! Synthetic degradations: fog (atmospheric scattering), low light (gamma),
//! snow (additive mask), rain (streak field) and Gaussian noise. Every output
//! is clamped to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Airlight used when fog is sampled.
pub const FOG_AIRLIGHT: f64 = 0.5;
/// Rain transparency used when rain is sampled.
pub const RAIN_BETA: f64 = 0.8;
/// Gamma range used when low light is sampled.
pub const DARK_GAMMA_RANGE: (f64, f64) = (1.5, 5.0);
/// Noise levels (8-bit scale) used when noise is sampled.
pub const NOISE_SIGMAS: [f64; 3] = [15.0, 25.0, 50.0];

/// Fog density from its level index: `0.05 + 0.01·i`.
pub fn fog_beta(i: u32) -> Result<f64> {
    if i > 9 {
        return Err(Error::Parameter(format!("fog level {i} outside 0..=9")));
    }
    Ok(0.05 + 0.01 * f64::from(i))
}

/// Atmospheric scattering with an explicit scattering coefficient.
pub fn apply_fog_beta(img: &Image, airlight: f64, beta: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::Parameter(format!("airlight {airlight} outside [0, 1]")));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Parameter(format!("fog density {beta} must be non-negative")));
    }
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let size = (h.max(w) as f64).sqrt();
    let transmission: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let rho = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let depth = -0.04 * rho + size;
            (-beta * depth).exp()
        })
        .collect();
    Ok(Image::from_fn(h, w, |y, x, c| {
        let t = transmission[y * w + x];
        (img.get(y, x, c) * t + airlight * (1.0 - t)).clamp(0.0, 1.0)
    }))
}

/// Fog at level `i ∈ 0..=9`.
pub fn apply_fog(img: &Image, airlight: f64, i: u32) -> Result<Image> {
    apply_fog_beta(img, airlight, fog_beta(i)?)
}

/// `I^γ`.
pub fn apply_dark(img: &Image, gamma: f64) -> Result<Image> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma {gamma} must be positive")));
    }
    Ok(img.map(|v| v.clamp(0.0, 1.0).powf(gamma)))
}

/// `clamp(I + M)`; the mask is resampled when its size differs.
pub fn apply_snow(img: &Image, mask: &Mask) -> Image {
    let mask = mask.resized(img.height(), img.width());
    Image::from_fn(img.height(), img.width(), |y, x, c| {
        (img.get(y, x, c) + mask.get(y, x)).clamp(0.0, 1.0)
    })
}

/// Rain-field synthesis settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainParams {
    /// Fraction of noise values below the drop threshold.
    pub quantile: f64,
    /// Streak orientation in degrees from the horizontal axis.
    pub angle_deg: f64,
    /// Streak length in pixels.
    pub length: usize,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            quantile: 0.97,
            angle_deg: 75.0,
            length: 12,
        }
    }
}

/// Normalized line kernel along `angle_deg`, as (dy, dx, weight) taps.
fn streak_kernel(params: &RainParams) -> Vec<(isize, isize, f64)> {
    let len = params.length.max(1);
    let (sin, cos) = params.angle_deg.to_radians().sin_cos();
    let mut taps: Vec<(isize, isize, f64)> = Vec::new();
    for s in 0..len {
        let t = s as f64 - (len as f64 - 1.0) / 2.0;
        let (dy, dx) = ((-t * sin).round() as isize, (t * cos).round() as isize);
        match taps.iter_mut().find(|(y, x, _)| *y == dy && *x == dx) {
            Some(tap) => tap.2 += 1.0,
            None => taps.push((dy, dx, 1.0)),
        }
    }
    for tap in &mut taps {
        tap.2 /= len as f64;
    }
    taps
}

/// Streak field R ∈ [0, 1]: thresholded seeded Gaussian noise, blurred along
/// the streak direction and rescaled by its maximum.
pub fn rain_field(height: usize, width: usize, seed: u64, params: &RainParams) -> Result<Mask> {
    if !(0.0..1.0).contains(&params.quantile) {
        return Err(Error::Parameter(format!("rain quantile {} outside [0, 1)", params.quantile)));
    }
    let n = height * width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut sorted = noise.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((params.quantile * n as f64) as usize).min(n - 1)];
    let drops: Vec<f64> = noise.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();

    let kernel = streak_kernel(params);
    let mut field = vec![0.0; n];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            for &(dy, dx, wgt) in &kernel {
                let (sy, sx) = (y + dy, x + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < height && (sx as usize) < width {
                    acc += wgt * drops[sy as usize * width + sx as usize];
                }
            }
            field[y as usize * width + x as usize] = acc;
        }
    }
    let max = field.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        field.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Mask {
        height,
        width,
        values: field,
    })
}

/// How the streak field is composited.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RainBlend {
    /// `I(1 − R) + βI`.
    #[default]
    Printed,
    /// `I(1 − R) + βR`: bright streaks.
    Overlay,
}

/// Composites a given streak field onto the image.
pub fn composite_rain(img: &Image, field: &Mask, beta: f64, blend: RainBlend) -> Result<Image> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("rain beta {beta} outside [0, 1]")));
    }
    let field = field.resized(img.height(), img.width());
    Ok(Image::from_fn(img.height(), img.width(), |y, x, c| {
        let (i, r) = (img.get(y, x, c), field.get(y, x));
        let extra = match blend {
            RainBlend::Printed => beta * i,
            RainBlend::Overlay => beta * r,
        };
        (i * (1.0 - r) + extra).clamp(0.0, 1.0)
    }))
}

pub fn apply_rain(img: &Image, beta: f64, seed: u64, params: &RainParams, blend: RainBlend) -> Result<Image> {
    let field = rain_field(img.height(), img.width(), seed, params)?;
    composite_rain(img, &field, beta, blend)
}

/// Standard-normal draws in pixel-major, channel-minor order.
pub fn noise_field(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..height * width * 3).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `clamp(I + N·σ/255)`.
pub fn apply_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Parameter(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let noise = noise_field(img.height(), img.width(), seed);
    let pixels = img
        .pixels()
        .iter()
        .zip(&noise)
        .map(|(&i, &n)| (i + n * sigma / 255.0).clamp(0.0, 1.0))
        .collect();
    Image::new(img.height(), img.width(), pixels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnowDensity {
    Light,
    #[default]
    Medium,
    Heavy,
}

impl SnowDensity {
    /// (flake centres per pixel, haze threshold).
    fn settings(self) -> (f64, f64) {
        match self {
            SnowDensity::Light => (0.004, 0.8),
            SnowDensity::Medium => (0.01, 0.7),
            SnowDensity::Heavy => (0.02, 0.6),
        }
    }
}

/// Smooth lattice noise in [0, 1] with cells of `cell` pixels.
fn value_noise<R: Rng>(height: usize, width: usize, cell: usize, rng: &mut R) -> Vec<f64> {
    let (gh, gw) = (height / cell + 2, width / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (gy, ty) = (y / cell, smooth((y % cell) as f64 / cell as f64));
        for x in 0..width {
            let (gx, tx) = (x / cell, smooth((x % cell) as f64 / cell as f64));
            let at = |a: usize, b: usize| lattice[a * gw + b];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bot = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Procedural snow mask: soft flakes over thresholded lattice-noise haze.
pub fn snow_mask(height: usize, width: usize, density: SnowDensity, seed: u64) -> Mask {
    let (rate, haze_threshold) = density.settings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let haze = value_noise(height, width, 8, &mut rng);
    let mut values: Vec<f64> = haze
        .iter()
        .map(|&v| 0.6 * ((v - haze_threshold) / (1.0 - haze_threshold)).max(0.0))
        .collect();
    let flakes = (rate * (height * width) as f64).round() as usize;
    for _ in 0..flakes {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let radius: f64 = rng.random_range(0.6..2.0);
        let bright: f64 = rng.random_range(0.6..1.0);
        let reach = radius.ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y as usize >= height || x as usize >= width {
                    continue;
                }
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                let v = bright * (1.0 - d / (radius + 1.0)).max(0.0);
                let slot = &mut values[y as usize * width + x as usize];
                *slot = slot.max(v);
            }
        }
    }
    Mask { height, width, values }
}

/// The degradation families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Fog,
    Dark,
    Snow,
    Rain,
    Noise,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Fog,
        DegradationKind::Dark,
        DegradationKind::Snow,
        DegradationKind::Rain,
        DegradationKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Fog => "fog",
            DegradationKind::Dark => "dark",
            DegradationKind::Snow => "snow",
            DegradationKind::Rain => "rain",
            DegradationKind::Noise => "noise",
        }
    }

    /// Draws parameters from the standard synthesis ranges.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> Degradation {
        match self {
            DegradationKind::Fog => Degradation::Fog {
                airlight: FOG_AIRLIGHT,
                level: rng.random_range(0..=9),
            },
            DegradationKind::Dark => Degradation::Dark {
                gamma: rng.random_range(DARK_GAMMA_RANGE.0..=DARK_GAMMA_RANGE.1),
            },
            DegradationKind::Snow => Degradation::Snow {
                density: SnowDensity::Medium,
            },
            DegradationKind::Rain => Degradation::Rain {
                beta: RAIN_BETA,
                blend: RainBlend::Printed,
            },
            DegradationKind::Noise => Degradation::Noise {
                sigma: NOISE_SIGMAS[rng.random_range(0..NOISE_SIGMAS.len())],
            },
        }
    }
}

impl std::fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown degradation kind `{s}`")))
    }
}

/// One degradation with its parameters. Serializes as
/// `{"kind": "...", "params": {...}}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Degradation {
    None,
    Fog {
        #[serde(rename = "A")]
        airlight: f64,
        #[serde(rename = "i")]
        level: u32,
    },
    Dark {
        gamma: f64,
    },
    Snow {
        density: SnowDensity,
    },
    Rain {
        beta: f64,
        #[serde(default)]
        blend: RainBlend,
    },
    Noise {
        sigma: f64,
    },
}

impl Degradation {
    pub fn kind(&self) -> Option<DegradationKind> {
        match self {
            Degradation::None => None,
            Degradation::Fog { .. } => Some(DegradationKind::Fog),
            Degradation::Dark { .. } => Some(DegradationKind::Dark),
            Degradation::Snow { .. } => Some(DegradationKind::Snow),
            Degradation::Rain { .. } => Some(DegradationKind::Rain),
            Degradation::Noise { .. } => Some(DegradationKind::Noise),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.kind().map_or("none", DegradationKind::name)
    }
}

/// A degradation plus the seed feeding its randomness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Self {
        DegradationSpec { degradation, seed }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.apply_with(img, &RainParams::default())
    }

    pub fn apply_with(&self, img: &Image, rain: &RainParams) -> Result<Image> {
        match self.degradation {
            Degradation::None => Ok(img.clone()),
            Degradation::Fog { airlight, level } => apply_fog(img, airlight, level),
            Degradation::Dark { gamma } => apply_dark(img, gamma),
            Degradation::Snow { density } => {
                Ok(apply_snow(img, &snow_mask(img.height(), img.width(), density, self.seed)))
            }
            Degradation::Rain { beta, blend } => apply_rain(img, beta, self.seed, rain, blend),
            Degradation::Noise { sigma } => apply_noise(img, sigma, self.seed),
        }
    }
}

/// Mixes a base seed with an index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
