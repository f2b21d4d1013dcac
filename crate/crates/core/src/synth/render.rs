//! Rasterizes labels into HR text images with a matching foreground mask.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font::{self, GLYPH_H, GLYPH_W};
use super::warp::{self, DeformationSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HR_HEIGHT: usize = 32;
pub const HR_WIDTH: usize = 128;
pub const SCALE_X: usize = 2;
pub const SCALE_Y: usize = 3;
/// Horizontal advance per character in HR pixels.
pub const PITCH: usize = 12;
pub const MAX_LABEL: usize = 10;
pub const MIN_CONTRAST: f64 = 0.3;

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    /// Relative brightness ramp across the width.
    pub gradient: f64,
    pub x_offset: usize,
    pub y_offset: usize,
}

impl GlyphStyle {
    /// Colours with luminance contrast at least [`MIN_CONTRAST`] and a random
    /// placement that keeps `len` characters inside the frame. Horizontal
    /// offsets are `1 mod 4`, which puts every undeformed character centre
    /// a quarter bin away from the nearest prior-step boundary.
    pub fn sample<R: Rng>(rng: &mut R, len: usize) -> Self {
        let (background, foreground) = loop {
            let bg = [rng.gen(), rng.gen(), rng.gen()];
            let fg = [rng.gen(), rng.gen(), rng.gen()];
            if (luminance(bg) - luminance(fg)).abs() >= MIN_CONTRAST {
                break (bg, fg);
            }
        };
        let text_w = text_width(len);
        let x_room = HR_WIDTH - text_w.min(HR_WIDTH);
        let y_room = HR_HEIGHT - GLYPH_H * SCALE_Y - 4;
        Self {
            background,
            foreground,
            gradient: rng.gen_range(-0.1..=0.1),
            x_offset: 1 + 4 * rng.gen_range(0..=x_room.saturating_sub(1) / 4),
            y_offset: 2 + rng.gen_range(0..=y_room),
        }
    }
}

pub fn text_width(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len * PITCH - (PITCH - GLYPH_W * SCALE_X)
    }
}

/// A rendered HR image, its foreground mask (`h×w`, values in `[0, 1]`)
/// and the centre of every character in pixel coordinates.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub centres: Vec<(f64, f64)>,
}

pub fn render_glyph_image(label: &str, style: &GlyphStyle) -> Result<Rendered> {
    let classes = font::encode_label(label)?;
    if text_width(classes.len()) > HR_WIDTH {
        return Err(Error::Contract(format!("label {label:?} does not fit")));
    }
    let (h, w) = (HR_HEIGHT, HR_WIDTH);
    let mut mask = vec![0.0; h * w];
    let mut centres = Vec::with_capacity(classes.len());
    for (i, &cls) in classes.iter().enumerate() {
        let x0 = style.x_offset + i * PITCH;
        let y0 = style.y_offset;
        centres.push((
            (x0 + GLYPH_W * SCALE_X / 2) as f64,
            y0 as f64 + (GLYPH_H * SCALE_Y) as f64 / 2.0,
        ));
        for r in 0..GLYPH_H {
            for c in 0..GLYPH_W {
                if !font::glyph_pixel(cls, r, c) {
                    continue;
                }
                for dy in 0..SCALE_Y {
                    for dx in 0..SCALE_X {
                        let (y, x) = (y0 + r * SCALE_Y + dy, x0 + c * SCALE_X + dx);
                        if y < h && x < w {
                            mask[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    let mut img = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let ramp = 1.0 + style.gradient * ((x as f64 + 0.5) / w as f64 - 0.5);
            let m = mask[y * w + x];
            for ch in 0..3 {
                let bg = (style.background[ch] * ramp).clamp(0.0, 1.0);
                img[(y * w + x) * 3 + ch] = bg + m * (style.foreground[ch] - bg);
            }
        }
    }
    Ok(Rendered {
        image: Tensor::new([h, w, 3], img)?,
        mask: Tensor::new([h, w], mask)?,
        centres,
    })
}

/// Renders from a seed alone: style drawn from a ChaCha stream.
pub fn render_from_seed(label: &str, seed: u64) -> Result<Rendered> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = GlyphStyle::sample(&mut rng, label.chars().count());
    render_glyph_image(label, &style)
}

/// Warps image, mask and character centres with the same spec.
pub fn deform_rendered(r: &Rendered, spec: &DeformationSpec) -> Result<Rendered> {
    let (h, w) = (r.mask.shape()[0], r.mask.shape()[1]);
    let image = warp::deform_image(&r.image, spec)?;
    let mask = warp::deform_image(&r.mask.clone().reshape(&[h, w, 1])?, spec)?.reshape(&[h, w])?;
    let centres = r
        .centres
        .iter()
        .map(|&(x, y)| spec.map_point(h, w, x, y))
        .collect();
    Ok(Rendered {
        image,
        mask,
        centres,
    })
}

/// Rounds to the nearest 8-bit level so on-disk and in-memory values agree.
pub fn quantize(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Prior step whose window holds each character centre.
pub fn slots_for(centres: &[(f64, f64)], width: usize, steps: usize) -> Vec<usize> {
    let bin = width as f64 / steps as f64;
    centres
        .iter()
        .map(|&(x, _)| ((x / bin).floor().max(0.0) as usize).min(steps - 1))
        .collect()
}

/// Fixed-length class targets: each character at its slot, blank elsewhere.
pub fn slot_targets(classes: &[usize], slots: &[usize], steps: usize) -> Vec<usize> {
    let mut t = vec![font::BLANK; steps];
    for (&c, &s) in classes.iter().zip(slots) {
        if s < steps {
            t[s] = c;
        }
    }
    t
}
