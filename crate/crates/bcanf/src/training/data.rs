//! Training data: procedurally generated moving-texture clips (translating,
//! slowly rotating crops of noise-and-gradient canvases) plus user-supplied
//! frame folders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::VideoSource;

/// Smooth random RGB canvas: a gradient base, a few sinusoids, and mild
/// per-pixel noise, all in [0, 1].
pub fn texture_canvas(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..8 {
        waves.push((
            rng.gen_range(0.05..0.6f64),
            rng.gen_range(0.05..0.6f64),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.1..0.35f64),
        ));
    }
    let (gx, gy) = (rng.gen_range(-0.3..0.3f64), rng.gen_range(-0.3..0.3f64));
    let mut t = Tensor::zeros([1, 3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.5 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
                for (i, &(fy, fx, ph, amp)) in waves.iter().enumerate() {
                    if i % 3 == c {
                        v += amp * (fy * y as f64 + fx * x as f64 + ph).sin() * 0.5;
                    }
                }
                v += rng.gen_range(-0.03..0.03);
                t.set(0, c, y, x, v.clamp(0.02, 0.98) as f32);
            }
        }
    }
    t
}

/// Bilinear crop of `size_h x size_w` with its top-left corner at the
/// subpixel canvas position (y, x), optionally rotated by `theta` around the
/// crop center. Samples are clamped to the canvas.
pub fn crop_at_rotated(
    canvas: &Tensor<f32>,
    y: f64,
    x: f64,
    theta: f64,
    size_h: usize,
    size_w: usize,
) -> Tensor<f32> {
    let [_, c, ch, cw] = canvas.shape();
    let mut out = Tensor::zeros([1, c, size_h, size_w]);
    let (sin, cos) = theta.sin_cos();
    let (cyc, cxc) = (size_h as f64 / 2.0, size_w as f64 / 2.0);
    for cc in 0..c {
        for oy in 0..size_h {
            for ox in 0..size_w {
                let ry = oy as f64 - cyc;
                let rx = ox as f64 - cxc;
                let sy = y + cyc + (cos * ry - sin * rx);
                let sx = x + cxc + (sin * ry + cos * rx);
                let y0 = sy.floor();
                let x0 = sx.floor();
                let ay = (sy - y0) as f32;
                let ax = (sx - x0) as f32;
                let yi = |v: f64| (v as i64).clamp(0, ch as i64 - 1) as usize;
                let xi = |v: f64| (v as i64).clamp(0, cw as i64 - 1) as usize;
                let (y0c, y1c) = (yi(y0), yi(y0 + 1.0));
                let (x0c, x1c) = (xi(x0), xi(x0 + 1.0));
                let v00 = canvas.at(0, cc, y0c, x0c);
                let v01 = canvas.at(0, cc, y0c, x1c);
                let v10 = canvas.at(0, cc, y1c, x0c);
                let v11 = canvas.at(0, cc, y1c, x1c);
                let top = (1.0 - ax) * v00 + ax * v01;
                let bot = (1.0 - ax) * v10 + ax * v11;
                out.set(0, cc, oy, ox, (1.0 - ay) * top + ay * bot);
            }
        }
    }
    out
}

pub fn crop_at(canvas: &Tensor<f32>, y: f64, x: f64, size_h: usize, size_w: usize) -> Tensor<f32> {
    crop_at_rotated(canvas, y, x, 0.0, size_h, size_w)
}

/// A batch of 5-frame sequences.
pub struct ClipBatch<T> {
    clips: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ClipBatch<T> {
    pub fn new(clips: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        for c in &clips {
            if c.len() != 5 {
                return Err(Error::Contract(format!(
                    "training clips hold five consecutive frames, got {}",
                    c.len()
                )));
            }
        }
        Ok(ClipBatch { clips })
    }

    pub fn clips(&self) -> &[Vec<Tensor<T>>] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Where training clips come from.
pub enum ClipSource {
    /// Procedural moving textures of the given square size.
    Synthetic { size: usize },
    /// Random 5-frame windows with random crops from a loaded video.
    Folder { video: VideoSource, crop: usize },
}

impl ClipSource {
    /// Draws one batch. Motion per clip is a constant subpixel velocity
    /// plus a slow rotation for the synthetic source.
    pub fn next_batch<T: Scalar>(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<ClipBatch<T>> {
        let mut clips = Vec::with_capacity(batch_size);
        match self {
            ClipSource::Synthetic { size } => {
                for _ in 0..batch_size {
                    let canvas = texture_canvas(2 * size + 16, 2 * size + 16, rng.gen());
                    let (mut y, mut x) = (
                        rng.gen_range(4.0..(*size as f64)),
                        rng.gen_range(4.0..(*size as f64)),
                    );
                    let vy = rng.gen_range(-2.0..2.0);
                    let vx = rng.gen_range(-2.0..2.0);
                    let omega = rng.gen_range(-0.01..0.01);
                    let mut theta = 0.0;
                    let mut frames = Vec::with_capacity(5);
                    for _ in 0..5 {
                        frames
                            .push(crop_at_rotated(&canvas, y, x, theta, *size, *size).cast::<T>());
                        y += vy;
                        x += vx;
                        theta += omega;
                    }
                    clips.push(frames);
                }
            }
            ClipSource::Folder { video, crop } => {
                if video.frame_count() < 5 {
                    return Err(Error::Contract(
                        "training video needs at least 5 frames".into(),
                    ));
                }
                let crop = *crop;
                if video.width < crop as u32 || video.height < crop as u32 {
                    return Err(Error::Contract(format!(
                        "video {}x{} smaller than crop {crop}",
                        video.width, video.height
                    )));
                }
                for _ in 0..batch_size {
                    let start = rng.gen_range(0..=(video.frame_count() as usize - 5));
                    let oy = rng.gen_range(0..=(video.height as usize - crop));
                    let ox = rng.gen_range(0..=(video.width as usize - crop));
                    let mut frames = Vec::with_capacity(5);
                    for t in 0..5 {
                        let full: Tensor<T> = video.to_tensor(start + t);
                        let mut f = Tensor::zeros([1, 3, crop, crop]);
                        for c in 0..3 {
                            for y in 0..crop {
                                for x in 0..crop {
                                    f.set(0, c, y, x, full.at(0, c, oy + y, ox + x));
                                }
                            }
                        }
                        frames.push(f);
                    }
                    clips.push(frames);
                }
            }
        }
        ClipBatch::new(clips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn canvas_values_in_range() {
        let c = texture_canvas(40, 40, 7);
        assert!(c.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn integer_crop_is_exact() {
        let c = texture_canvas(40, 40, 8);
        let k = crop_at(&c, 5.0, 9.0, 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(k.at(0, 0, y, x), c.at(0, 0, y + 5, x + 9));
            }
        }
    }

    #[test]
    fn batches_have_five_frames_per_clip() {
        let mut rng = StdRng::seed_from_u64(9);
        let src = ClipSource::Synthetic { size: 32 };
        let b: ClipBatch<f32> = src.next_batch(3, &mut rng).unwrap();
        assert_eq!(b.len(), 3);
        for clip in b.clips() {
            assert_eq!(clip.len(), 5);
            for f in clip {
                assert_eq!(f.shape(), [1, 3, 32, 32]);
            }
        }
    }

    #[test]
    fn folder_source_crops_windows() {
        let frames: Vec<Vec<u8>> = (0..6)
            .map(|k| (0..24 * 20 * 3).map(|i| ((i + k * 11) % 256) as u8).collect())
            .collect();
        let video = VideoSource::new(20, 24, frames).unwrap();
        let src = ClipSource::Folder { video, crop: 16 };
        let mut rng = StdRng::seed_from_u64(10);
        let b: ClipBatch<f32> = src.next_batch(2, &mut rng).unwrap();
        assert_eq!(b.clips()[0][0].shape(), [1, 3, 16, 16]);
    }
}
