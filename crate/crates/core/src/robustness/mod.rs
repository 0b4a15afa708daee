//! Post-processing transforms, robustness sweeps, attacks and collusion.

pub mod attacks;
pub mod collusion;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attribution::{bit_accuracy, decode_logits};
use crate::error::{invalid, Result};
use crate::font;
use crate::kernels;
use crate::nets::{BakedDecoder, Model};
use crate::registry::WatermarkMessage;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use crate::metrics::{linf, psnr, quality, ssim, QualityReport};

/// Text stamped by the overlay transform.
pub const OVERLAY_TEXT: &str = "COPY";

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
const GAUSS3: [f32; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Scales every channel (hence HSV value) by the magnitude, in `[0, 4]`.
    Brightness,
    /// `(p − mean luma) · magnitude + mean luma`, magnitude in `[0, 4]`.
    Contrast,
    /// Blend away from per-pixel luma by the magnitude, in `[0, 4]`.
    Saturation,
    /// Unsharp mask `p + (magnitude − 1)(p − gauss3(p))`, magnitude in `[0, 4]`.
    Sharpen,
    /// Keeps a window of area fraction `magnitude ∈ (0, 1]` at a seeded offset.
    /// Sides never shrink below 8 pixels.
    Crop,
    /// Stamps [`OVERLAY_TEXT`] in black at a seeded position with opacity
    /// `magnitude ∈ [0, 1]`.
    TextOverlay,
    /// Adds Gaussian noise with σ = magnitude on the `[0, 1]` scale, in `[0, 1]`.
    GaussNoise,
}

impl TransformKind {
    fn range(self) -> (f64, f64, bool) {
        // (lo, hi, lo exclusive)
        match self {
            Self::Brightness | Self::Contrast | Self::Saturation | Self::Sharpen => (0.0, 4.0, false),
            Self::Crop => (0.0, 1.0, true),
            Self::TextOverlay | Self::GaussNoise => (0.0, 1.0, false),
        }
    }

    fn identity(self) -> f64 {
        match self {
            Self::Brightness | Self::Contrast | Self::Saturation | Self::Sharpen | Self::Crop => 1.0,
            Self::TextOverlay | Self::GaussNoise => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Saturation => "saturation",
            Self::Sharpen => "sharpen",
            Self::Crop => "crop",
            Self::TextOverlay => "text_overlay",
            Self::GaussNoise => "gauss_noise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub magnitude: f64,
    /// Seeds crop offsets, text positions and noise.
    pub seed: u64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, magnitude: f64) -> Result<Self> {
        let spec = Self { kind, magnitude, seed: 0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi, open) = self.kind.range();
        let m = self.magnitude;
        let ok = m.is_finite() && m <= hi && if open { m > lo } else { m >= lo };
        if !ok {
            let l = if open { "(" } else { "[" };
            return Err(invalid(format!(
                "{} magnitude {m} outside {l}{lo}, {hi}]",
                self.kind.name()
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.magnitude == self.kind.identity()
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TransformKind::TextOverlay if self.magnitude == 1.0 => write!(f, "text_overlay"),
            k => write!(f, "{} {}", k.name(), self.magnitude),
        }
    }
}

/// The eight post-processing settings of the robustness table, in order.
pub fn standard_transforms() -> Vec<TransformSpec> {
    use TransformKind::*;
    [
        (Brightness, 1.5),
        (Sharpen, 2.0),
        (Sharpen, 1.5),
        (TextOverlay, 1.0),
        (Contrast, 1.5),
        (Crop, 0.1),
        (Saturation, 2.0),
        (Saturation, 1.5),
    ]
    .into_iter()
    .map(|(k, m)| TransformSpec::new(k, m).unwrap())
    .collect()
}

fn clamp_unit(v: f32) -> f32 {
    v.clamp(-1.0, 1.0)
}

fn luma_at(d: &[f32], plane: usize, i: usize) -> f32 {
    LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i]
}

pub fn apply_transform(img: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(invalid(format!("transforms expect RGB images, got {c} channels")));
    }
    if spec.is_identity() {
        return Ok(img.clone());
    }
    let mag = spec.magnitude as f32;
    let d = img.data();
    let plane = h * w;
    let mut rng = Rng::new(spec.seed);
    let out = match spec.kind {
        // v ∈ [0, 1] scaled by mag is p' = (p + 1)·mag − 1 in [−1, 1] units.
        TransformKind::Brightness => img.map(|p| clamp_unit((p + 1.0) * mag - 1.0)),
        TransformKind::Contrast => {
            let mean = (0..plane).map(|i| luma_at(d, plane, i) as f64).sum::<f64>() / plane as f64;
            let mean = mean as f32;
            img.map(|p| clamp_unit((p - mean) * mag + mean))
        }
        TransformKind::Saturation => {
            let mut out = d.to_vec();
            for i in 0..plane {
                let y = luma_at(d, plane, i);
                for ch in 0..3 {
                    out[ch * plane + i] = clamp_unit(y + (d[ch * plane + i] - y) * mag);
                }
            }
            Tensor::new(&[3, h, w], out)?
        }
        TransformKind::Sharpen => {
            let blur = kernels::depthwise3_replicate(d, c, h, w, &GAUSS3);
            let out = d
                .iter()
                .zip(&blur)
                .map(|(&p, &b)| clamp_unit(p + (mag - 1.0) * (p - b)))
                .collect();
            Tensor::new(&[3, h, w], out)?
        }
        TransformKind::Crop => {
            let side = |n: usize| ((n as f64 * spec.magnitude.sqrt()).round() as usize).clamp(8.min(n), n);
            let (ch_, cw) = (side(h), side(w));
            let y0 = rng.below(h - ch_ + 1);
            let x0 = rng.below(w - cw + 1);
            let mut out = Vec::with_capacity(3 * ch_ * cw);
            for ch in 0..3 {
                for y in y0..y0 + ch_ {
                    out.extend_from_slice(&d[ch * plane + y * w + x0..ch * plane + y * w + x0 + cw]);
                }
            }
            Tensor::new(&[3, ch_, cw], out)?
        }
        TransformKind::TextOverlay => {
            let tw = font::text_width(OVERLAY_TEXT);
            let x0 = rng.below(w.saturating_sub(tw) + 1);
            let y0 = rng.below(h.saturating_sub(font::GLYPH_H) + 1);
            let mut out = d.to_vec();
            for (x, y) in font::text_pixels(OVERLAY_TEXT) {
                let (x, y) = (x0 + x, y0 + y);
                if x >= w || y >= h {
                    continue;
                }
                for ch in 0..3 {
                    let p = &mut out[ch * plane + y * w + x];
                    *p = (1.0 - mag) * *p - mag;
                }
            }
            Tensor::new(&[3, h, w], out)?
        }
        TransformKind::GaussNoise => {
            let sigma = 2.0 * spec.magnitude;
            let out = d
                .iter()
                .map(|&p| clamp_unit(p + (sigma * rng.gaussian()) as f32))
                .collect();
            Tensor::new(&[3, h, w], out)?
        }
    };
    Ok(out)
}

/// Mean bit accuracy of the extractor on one transformed image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub transform: String,
    pub images: usize,
    pub bit_accuracy: f64,
}

/// Generates `n_images` watermarked images with `baked` (latents cycle
/// through `latents`, noise from `seed`), then reports mean bit accuracy
/// against `m` with no transform and after each of `transforms`. Image `i`
/// uses transform seed `spec.seed + i`.
pub fn robustness_sweep(
    model: &Model,
    baked: &BakedDecoder,
    m: &WatermarkMessage,
    latents: &[Tensor],
    transforms: &[TransformSpec],
    n_images: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if latents.is_empty() || n_images == 0 {
        return Err(invalid("robustness sweep needs latents and a positive image count"));
    }
    let mut noise = Rng::new(seed);
    let images = (0..n_images)
        .map(|i| baked.decode(&latents[i % latents.len()], Some(&mut noise)))
        .collect::<Result<Vec<_>>>()?;
    let score = |label: String, f: &dyn Fn(usize, &Tensor) -> Result<Tensor>| -> Result<SweepRow> {
        let mut acc = 0.0;
        for (i, img) in images.iter().enumerate() {
            let t = f(i, img)?;
            acc += bit_accuracy(m.bits(), &decode_logits(&model.extract(&t)?))?;
        }
        Ok(SweepRow {
            transform: label,
            images: n_images,
            bit_accuracy: acc / n_images as f64,
        })
    };
    let mut rows = vec![score("none".into(), &|_, img| Ok(img.clone()))?];
    for spec in transforms {
        rows.push(score(spec.to_string(), &|i, img| {
            apply_transform(img, &spec.with_seed(spec.seed.wrapping_add(i as u64)))
        })?);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("transform,images,bit_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.transform, r.images, r.bit_accuracy));
    }
    s
}
