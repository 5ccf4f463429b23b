//! Procedural PAD dataset: images rendered from explicit nuisance factors
//! (background hue, glyph identity, glyph position) and one signal factor,
//! a fixed checkerboard "spoof texture" present only on attacks.

mod generate;
mod ppm;
mod probe;

pub use generate::{
    generate_dataset, load_manifest, load_split, plan_manifest, write_manifest, CorrelationMode, Dataset, DatasetPlan, Manifest,
    ManifestRow, Split, MANIFEST_FILE,
};
pub use ppm::{read_ppm, write_ppm};
pub use probe::{nuisance_probe, PROBE_FOLDS, PROBE_STEPS};

use crate::error::DataError;
use crate::rng::{splitmix64, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HUES: usize = 8;
pub const GLYPHS: usize = 16;
pub const OFFSETS: usize = 9;

/// Glyph bitmap side, in cells.
const GLYPH_CELLS: usize = 5;

/// Rendering parameters shared by every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSpec {
    pub height: usize,
    pub width: usize,
    /// Attack amplitudes are drawn uniformly from `[amp_min, amp_max]`.
    pub amp_min: f64,
    pub amp_max: f64,
    /// Half-width of the additive uniform pixel noise.
    pub noise_sigma: f64,
    /// Checker period in pixels (even).
    pub texture_period: usize,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self { height: 54, width: 54, amp_min: 0.08, amp_max: 0.25, noise_sigma: 0.05, texture_period: 2 }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.height < 2 * GLYPH_CELLS || self.width < 2 * GLYPH_CELLS {
            return Err(DataError::Invalid(format!("image {}x{} too small", self.height, self.width)));
        }
        if !(0.0 < self.amp_min && self.amp_min <= self.amp_max && self.amp_max <= 1.0) {
            return Err(DataError::Invalid(format!(
                "spoof amplitude range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.amp_min, self.amp_max
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(DataError::Invalid(format!("noise_sigma {} outside [0, 1]", self.noise_sigma)));
        }
        if self.texture_period == 0 || self.texture_period % 2 != 0 {
            return Err(DataError::Invalid(format!("texture_period {} must be even", self.texture_period)));
        }
        Ok(())
    }

    /// Value of the unit-amplitude spoof texture at `(y, x)`: +1 or -1.
    pub fn texture(&self, y: usize, x: usize) -> f64 {
        let half = self.texture_period / 2;
        if (y / half + x / half) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Ground-truth factors of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Factors {
    pub background_hue: usize,
    pub identity_glyph: usize,
    pub glyph_offset: usize,
    /// Zero for bona fide samples.
    pub spoof_amplitude: f64,
}

impl Factors {
    /// 1 = bona fide, 0 = attack.
    pub fn label(&self) -> u8 {
        u8::from(self.spoof_amplitude <= 0.0)
    }
}

/// RGB of background hue `h`: eight evenly spaced hues kept in a mid-range
/// band so glyph, texture and noise stay clear of the clamp.
pub fn hue_rgb(h: usize) -> [f64; 3] {
    let angle = h as f64 * std::f64::consts::TAU / HUES as f64;
    let third = std::f64::consts::TAU / 3.0;
    [0.5 + 0.14 * angle.cos(), 0.5 + 0.14 * (angle - third).cos(), 0.5 + 0.14 * (angle - 2.0 * third).cos()]
}

/// Left-right symmetric 5x5 bitmap of glyph `g`, row-major.
pub fn glyph_bitmap(g: usize) -> [bool; GLYPH_CELLS * GLYPH_CELLS] {
    let mut key = g as u64;
    loop {
        let bits = splitmix64(key.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0x5A17) & 0x7FFF;
        // redraw sparse patterns so every glyph has a visible body
        if bits.count_ones() >= 6 {
            let mut out = [false; GLYPH_CELLS * GLYPH_CELLS];
            for r in 0..GLYPH_CELLS {
                for c in 0..3 {
                    let on = bits >> (r * 3 + c) & 1 == 1;
                    out[r * GLYPH_CELLS + c] = on;
                    out[r * GLYPH_CELLS + GLYPH_CELLS - 1 - c] = on;
                }
            }
            return out;
        }
        key = key.wrapping_add(GLYPHS as u64);
    }
}

/// Renders `factors` as a `[3, H, W]` image in `[0, 1]`: background hue,
/// glyph at its offset, spoof texture scaled by the amplitude, uniform
/// noise, clamp.
pub fn render_sample<T: Scalar>(spec: &FactorSpec, f: &Factors, rng: &mut Rng) -> Result<Tensor<T>, DataError> {
    if f.background_hue >= HUES {
        return Err(DataError::UnknownLevel(format!("background_hue {} (levels 0..{HUES})", f.background_hue)));
    }
    if f.identity_glyph >= GLYPHS {
        return Err(DataError::UnknownLevel(format!("identity_glyph {} (levels 0..{GLYPHS})", f.identity_glyph)));
    }
    if f.glyph_offset >= OFFSETS {
        return Err(DataError::UnknownLevel(format!("glyph_offset {} (levels 0..{OFFSETS})", f.glyph_offset)));
    }
    if !(0.0..=1.0).contains(&f.spoof_amplitude) {
        return Err(DataError::UnknownLevel(format!("spoof_amplitude {}", f.spoof_amplitude)));
    }
    let (h, w) = (spec.height, spec.width);
    let bg = hue_rgb(f.background_hue);
    let fg = bg.map(|v| 0.75 * v + 0.03);
    let cell = (h.min(w) / 18).max(1);
    let side = cell * GLYPH_CELLS;
    let (step_y, step_x) = (h / 6, w / 6);
    let top = (h / 2 + (f.glyph_offset / 3) * step_y).saturating_sub(step_y + side / 2);
    let left = (w / 2 + (f.glyph_offset % 3) * step_x).saturating_sub(step_x + side / 2);
    let bitmap = glyph_bitmap(f.identity_glyph);

    let mut data = Vec::with_capacity(3 * h * w);
    for (&b, &g) in bg.iter().zip(&fg) {
        for y in 0..h {
            for x in 0..w {
                let in_glyph = (top..top + side).contains(&y)
                    && (left..left + side).contains(&x)
                    && bitmap[((y - top) / cell) * GLYPH_CELLS + (x - left) / cell];
                let mut v = if in_glyph { g } else { b };
                v += f.spoof_amplitude * spec.texture(y, x);
                data.push(v);
            }
        }
    }
    for v in &mut data {
        if spec.noise_sigma > 0.0 {
            *v += rng.uniform_range(-spec.noise_sigma, spec.noise_sigma);
        }
    }
    let data = data.into_iter().map(|v| T::from_f64_lossy(v.clamp(0.0, 1.0))).collect();
    Ok(Tensor::new(&[3, h, w], data)?)
}
