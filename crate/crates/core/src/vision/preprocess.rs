use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::error::{Error, Result};

/// Temporal sampling and output resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub frames: usize,
    pub stride: usize,
    pub size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            stride: 4,
            size: 224,
        }
    }
}

impl PreprocessConfig {
    /// Raw frames needed to take `frames` samples at `stride`.
    pub fn min_input_frames(&self) -> usize {
        (self.frames - 1) * self.stride + 1
    }
}

/// Training-time augmentation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    /// Area fraction range for random resized cropping.
    pub crop_scale: Option<(f64, f64)>,
    pub hflip: bool,
}

impl Augment {
    pub fn off() -> Self {
        Self {
            crop_scale: None,
            hflip: false,
        }
    }

    pub fn standard() -> Self {
        Self {
            crop_scale: Some((0.5, 1.0)),
            hflip: true,
        }
    }

    /// Draws the crop window and flip for one clip.
    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> AugmentDecision {
        let crop = self.crop_scale.map(|(lo, hi)| {
            let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let side = s.sqrt();
            let ch = ((height as f64 * side).round() as usize).clamp(1, height);
            let cw = ((width as f64 * side).round() as usize).clamp(1, width);
            let y0 = rng.random_range(0..=height - ch);
            let x0 = rng.random_range(0..=width - cw);
            (y0, x0, ch, cw)
        });
        let flip = self.hflip && rng.random_bool(0.5);
        AugmentDecision { crop, flip }
    }
}

/// A concrete augmentation: crop window `(y0, x0, h, w)` and flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDecision {
    pub crop: Option<(usize, usize, usize, usize)>,
    pub flip: bool,
}

/// Bilinear resampling of the `crop` window of one `[H, W, C]` frame to
/// `[size, size, C]`, with pixel centers at half-integer coordinates.
pub fn resize_bilinear(
    frame: &[f32],
    width: usize,
    channels: usize,
    crop: (usize, usize, usize, usize),
    size: usize,
) -> Vec<f32> {
    let (y0, x0, ch, cw) = crop;
    let mut out = Vec::with_capacity(size * size * channels);
    let axis = |dst: usize, n_in: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / size as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    for oy in 0..size {
        let (ya, yb, fy) = axis(oy, ch);
        for ox in 0..size {
            let (xa, xb, fx) = axis(ox, cw);
            for c in 0..channels {
                let px = |y: usize, x: usize| frame[((y0 + y) * width + x0 + x) * channels + c];
                let top = px(ya, xa) * (1.0 - fx) + px(ya, xb) * fx;
                let bot = px(yb, xa) * (1.0 - fx) + px(yb, xb) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Mirrors every frame left to right.
pub fn hflip(clip: &VideoClip) -> VideoClip {
    let mut out = clip.clone();
    let (t, h, w, c) = clip.dims();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    let i = clip.index(ti, y, x, ci);
                    out.pixels[i] = clip.at(ti, y, w - 1 - x, ci);
                }
            }
        }
    }
    out
}

/// Strided temporal sampling from frame 0, optional random resized crop,
/// resize to `size × size`, optional horizontal flip.
pub fn preprocess(raw: &VideoClip, cfg: &PreprocessConfig, aug: &Augment, rng: &mut impl Rng) -> Result<VideoClip> {
    if cfg.frames == 0 || cfg.stride == 0 || cfg.size == 0 {
        return Err(Error::Validation("frames, stride and size must be positive".into()));
    }
    if let Some(i) = raw.pixels.iter().position(|p| !p.is_finite()) {
        return Err(Error::Validation(format!("non-finite pixel at index {i}")));
    }
    let need = cfg.min_input_frames();
    if raw.frames < need {
        return Err(Error::InsufficientTemporalExtent { have: raw.frames, need });
    }
    let (h, w, c) = (raw.height, raw.width, raw.channels);
    let decision = aug.sample(h, w, rng);
    let window = decision.crop.unwrap_or((0, 0, h, w));
    let identity = window == (0, 0, h, w) && h == cfg.size && w == cfg.size;
    let mut pixels = Vec::with_capacity(cfg.frames * cfg.size * cfg.size * c);
    for i in 0..cfg.frames {
        let f = raw.frame(i * cfg.stride);
        if identity {
            pixels.extend_from_slice(f);
        } else {
            pixels.extend(resize_bilinear(f, w, c, window, cfg.size));
        }
    }
    let clip = VideoClip::new(cfg.frames, cfg.size, cfg.size, c, pixels)?;
    Ok(if decision.flip { hflip(&clip) } else { clip })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn ramp(frames: usize, size: usize) -> VideoClip {
        let n = frames * size * size * 3;
        VideoClip::new(
            frames,
            size,
            size,
            3,
            (0..n).map(|v| (v % 251) as f32 / 251.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stride_four_selects_every_fourth_frame() {
        let mut raw = VideoClip::zeros(64, 8, 8, 1);
        for t in 0..64 {
            let n = 64;
            raw.pixels[t * n..(t + 1) * n].fill(t as f32 / 64.0);
        }
        let cfg = PreprocessConfig {
            size: 8,
            ..Default::default()
        };
        let out = preprocess(&raw, &cfg, &Augment::off(), &mut seed::rng(0, "t")).unwrap();
        let picked: Vec<usize> = (0..16).map(|t| (out.at(t, 0, 0, 0) * 64.0).round() as usize).collect();
        assert_eq!(picked, (0..16).map(|i| i * 4).collect::<Vec<_>>());
    }

    #[test]
    fn already_sized_input_is_bitwise_identity() {
        let raw = ramp(61, 224);
        let out = preprocess(
            &raw,
            &PreprocessConfig::default(),
            &Augment::off(),
            &mut seed::rng(0, "t"),
        )
        .unwrap();
        for t in 0..16 {
            assert_eq!(out.frame(t), raw.frame(4 * t));
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let raw = VideoClip::zeros(60, 8, 8, 1);
        let err = preprocess(
            &raw,
            &PreprocessConfig::default(),
            &Augment::off(),
            &mut seed::rng(0, "t"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientTemporalExtent { have: 60, need: 61 }));
    }

    #[test]
    fn flip_is_a_reflection() {
        let raw = ramp(61, 16);
        let cfg = PreprocessConfig {
            size: 16,
            ..Default::default()
        };
        let aug = Augment {
            crop_scale: None,
            hflip: true,
        };
        let plain = preprocess(&raw, &cfg, &Augment::off(), &mut seed::rng(0, "x")).unwrap();
        let mut flipped_any = false;
        for s in 0..8 {
            let mut rng = seed::rng(s, "flip");
            let d = aug.sample(16, 16, &mut seed::rng(s, "flip"));
            let out = preprocess(&raw, &cfg, &aug, &mut rng).unwrap();
            if d.flip {
                flipped_any = true;
                for t in 0..16 {
                    for y in 0..16 {
                        for x in 0..16 {
                            for c in 0..3 {
                                assert_eq!(out.at(t, y, x, c), plain.at(t, y, 15 - x, c));
                            }
                        }
                    }
                }
            } else {
                assert_eq!(out, plain);
            }
        }
        assert!(flipped_any);
    }

    #[test]
    fn same_seed_same_decisions() {
        let aug = Augment::standard();
        for s in 0..20 {
            assert_eq!(
                aug.sample(64, 48, &mut seed::rng(s, "a")),
                aug.sample(64, 48, &mut seed::rng(s, "a"))
            );
        }
    }

    #[test]
    fn crop_area_within_scale_range() {
        let aug = Augment::standard();
        let mut rng = seed::rng(5, "crop");
        for _ in 0..200 {
            let (y0, x0, h, w) = aug.sample(224, 224, &mut rng).crop.unwrap();
            let area = (h * w) as f64 / (224.0 * 224.0);
            assert!((0.49..=1.0).contains(&area), "{area}");
            assert!(y0 + h <= 224 && x0 + w <= 224);
        }
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let f = vec![0.25f32; 10 * 10 * 2];
        let out = resize_bilinear(&f, 10, 2, (1, 2, 7, 5), 13);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
