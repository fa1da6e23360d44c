//! Video clips, preprocessing, and space-time voxelization.
//!
//! A clip is stored as `[T, H, W, C]` row-major `f32`. Voxelization cuts it
//! into `p_t × p_h × p_w` blocks and flattens each block, channels
//! included, into one token. Tokens are ordered temporal block first, then
//! row block, then column block.
//!
//! ```
//! use avstage::vision::{voxelize, unvoxelize, PatchGeometry, VideoClip};
//!
//! let clip = VideoClip::zeros(4, 32, 32, 1);
//! let grid = voxelize(&clip, &PatchGeometry::new(16, 16, 2)).unwrap();
//! assert_eq!((grid.n_tokens(), grid.token_dim()), (8, 512));
//! assert_eq!(unvoxelize(&grid).unwrap(), clip);
//! ```

mod clipfile;
mod preprocess;

pub use clipfile::{read_clip, write_clip, CLIP_MAGIC, CLIP_VERSION};
pub use preprocess::{hflip, preprocess, resize_bilinear, Augment, AugmentDecision, PreprocessConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Pixels `[T, H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != frames * height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for a {frames}x{height}x{width}x{channels} clip",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            pixels: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[self.index(t, y, x, c)]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.pixels[t * n..(t + 1) * n]
    }
}

/// Space-time patch edge lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub p_h: usize,
    pub p_w: usize,
    pub p_t: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self::new(16, 16, 2)
    }
}

impl PatchGeometry {
    pub fn new(p_h: usize, p_w: usize, p_t: usize) -> Self {
        Self { p_h, p_w, p_t }
    }

    /// Patch size used by the small default configuration.
    pub fn desk() -> Self {
        Self::new(8, 8, 2)
    }

    pub fn check(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        for (axis, extent, patch) in [
            ("time", frames, self.p_t),
            ("height", height, self.p_h),
            ("width", width, self.p_w),
        ] {
            if patch == 0 || extent == 0 || extent % patch != 0 {
                return Err(Error::NotDivisible { axis, extent, patch });
            }
        }
        Ok(())
    }

    /// `(T/p_t, H/p_h, W/p_w)`.
    pub fn grid(&self, frames: usize, height: usize, width: usize) -> (usize, usize, usize) {
        (frames / self.p_t, height / self.p_h, width / self.p_w)
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        self.p_t * self.p_h * self.p_w * channels
    }
}

/// Flattened space-time patches of one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    /// `[n_tokens, token_dim]`.
    pub tokens: Tensor<f32>,
    pub geometry: PatchGeometry,
    /// `(T, H, W, C)` of the source clip.
    pub source_dims: (usize, usize, usize, usize),
}

impl VoxelGrid {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Token grid extents `(t, h, w)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.source_dims;
        self.geometry.grid(t, h, w)
    }
}

fn for_each_voxel(dims: (usize, usize, usize, usize), g: &PatchGeometry, mut f: impl FnMut(usize, usize)) {
    let (t, h, w, c) = dims;
    let (gt, gh, gw) = g.grid(t, h, w);
    let mut dst = 0;
    for bt in 0..gt {
        for bh in 0..gh {
            for bw in 0..gw {
                for dt in 0..g.p_t {
                    for dy in 0..g.p_h {
                        let row = ((bt * g.p_t + dt) * h + bh * g.p_h + dy) * w + bw * g.p_w;
                        let start = row * c;
                        for i in 0..g.p_w * c {
                            f(start + i, dst);
                            dst += 1;
                        }
                    }
                }
            }
        }
    }
}

pub fn voxelize(clip: &VideoClip, g: &PatchGeometry) -> Result<VoxelGrid> {
    let (t, h, w, c) = clip.dims();
    g.check(t, h, w)?;
    let (gt, gh, gw) = g.grid(t, h, w);
    let mut tokens = vec![0.0f32; clip.pixels.len()];
    for_each_voxel(clip.dims(), g, |src, dst| tokens[dst] = clip.pixels[src]);
    Ok(VoxelGrid {
        tokens: Tensor::from_vec(&[gt * gh * gw, g.token_dim(c)], tokens),
        geometry: *g,
        source_dims: clip.dims(),
    })
}

pub fn unvoxelize(grid: &VoxelGrid) -> Result<VideoClip> {
    let (t, h, w, c) = grid.source_dims;
    let g = &grid.geometry;
    g.check(t, h, w)?;
    let (gt, gh, gw) = g.grid(t, h, w);
    if grid.tokens.rows() != gt * gh * gw || grid.tokens.cols() != g.token_dim(c) {
        return Err(Error::Shape(format!(
            "{}x{} tokens do not match a {t}x{h}x{w}x{c} source",
            grid.tokens.rows(),
            grid.tokens.cols()
        )));
    }
    let mut pixels = vec![0.0f32; t * h * w * c];
    let data = grid.tokens.data();
    for_each_voxel(grid.source_dims, g, |dst, src| pixels[dst] = data[src]);
    VideoClip::new(t, h, w, c, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_geometry_token_count() {
        let clip = VideoClip::zeros(16, 224, 224, 3);
        let v = voxelize(&clip, &PatchGeometry::default()).unwrap();
        assert_eq!((v.n_tokens(), v.token_dim()), (14 * 14 * 8, 1536));
        assert!(v.tokens.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn token_content_is_t_h_w_c_block() {
        let pixels = (0..4 * 4 * 4 * 2).map(|v| v as f32).collect();
        let clip = VideoClip::new(4, 4, 4, 2, pixels).unwrap();
        let g = PatchGeometry::new(2, 2, 2);
        let v = voxelize(&clip, &g).unwrap();
        // token 3 = (bt 0, bh 1, bw 1)
        let tok = v.tokens.row(3);
        let mut i = 0;
        for dt in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    for c in 0..2 {
                        assert_eq!(tok[i], clip.at(dt, 2 + dy, 2 + dx, c));
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_is_the_reshaped_clip() {
        let pixels: Vec<f32> = (0..2 * 3 * 3).map(|v| v as f32 / 20.0).collect();
        let grid = VoxelGrid {
            tokens: Tensor::from_vec(&[1, 18], pixels.clone()),
            geometry: PatchGeometry::new(3, 3, 2),
            source_dims: (2, 3, 3, 1),
        };
        assert_eq!(unvoxelize(&grid).unwrap().pixels, pixels);
    }

    #[test]
    fn non_divisible_axis_is_named() {
        let clip = VideoClip::zeros(4, 30, 32, 1);
        let err = voxelize(&clip, &PatchGeometry::new(16, 16, 2)).unwrap_err();
        assert!(matches!(
            err,
            Error::NotDivisible {
                axis: "height",
                extent: 30,
                patch: 16
            }
        ));
    }

    #[test]
    fn inconsistent_token_count_is_rejected() {
        let grid = VoxelGrid {
            tokens: Tensor::zeros(&[3, 512]),
            geometry: PatchGeometry::new(16, 16, 2),
            source_dims: (4, 32, 32, 1),
        };
        assert!(unvoxelize(&grid).is_err());
    }
}
