//! Video I/O: y4m 4:2:0 (converted to RGB with BT.601 full-range matrices
//! and bilinear chroma upsampling), headerless raw RGB24, and PPM sequences.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoded video: 8-bit interleaved RGB frames of identical dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoSource {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Vec<u8>>,
}

impl VideoSource {
    pub fn new(width: u32, height: u32, frames: Vec<Vec<u8>>) -> Result<Self> {
        let expect = (width * height * 3) as usize;
        for (i, f) in frames.iter().enumerate() {
            if f.len() != expect {
                return Err(Error::Video(format!(
                    "frame {i} has {} bytes, expected {expect}",
                    f.len()
                )));
            }
        }
        Ok(VideoSource { width, height, frames })
    }

    pub fn frame_count(&self) -> u32 {
        self.frames.len() as u32
    }

    /// Frame as a [1, 3, H, W] tensor scaled to [0, 1].
    pub fn to_tensor<T: Scalar>(&self, idx: usize) -> Tensor<T> {
        let (w, h) = (self.width as usize, self.height as usize);
        let rgb = &self.frames[idx];
        let mut t = Tensor::zeros([1, 3, h, w]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                    t.set(0, c, y, x, T::from_f64(v));
                }
            }
        }
        t
    }
}

/// Tensor in [0, 1] back to an 8-bit interleaved RGB frame.
pub fn tensor_to_rgb8<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let [_, c, h, w] = t.shape();
    debug_assert_eq!(c, 3);
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for cc in 0..3 {
                let v = (t.at(0, cc, y, x).as_f64() * 255.0).round().clamp(0.0, 255.0);
                out[(y * w + x) * 3 + cc] = v as u8;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoFormat {
    Y4m420,
    RawRgb,
    PpmSequence,
}

impl VideoFormat {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "y4m-420" | "y4m" => VideoFormat::Y4m420,
            "raw-rgb" | "raw" => VideoFormat::RawRgb,
            "ppm-sequence" | "ppm" => VideoFormat::PpmSequence,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown video format {other} (expected y4m-420, raw-rgb, or ppm-sequence)"
                )))
            }
        })
    }
}

/// Reads a video. `raw_dims` supplies the dimensions for the headerless
/// raw-rgb format.
pub fn read_video(
    path: &Path,
    format: VideoFormat,
    raw_dims: Option<(u32, u32)>,
) -> Result<VideoSource> {
    match format {
        VideoFormat::Y4m420 => read_y4m(path),
        VideoFormat::RawRgb => {
            let (w, h) = raw_dims.ok_or_else(|| {
                Error::InvalidConfig("raw-rgb input needs --width and --height".into())
            })?;
            read_raw(path, w, h)
        }
        VideoFormat::PpmSequence => read_ppm_sequence(path),
    }
}

pub fn read_raw(path: &Path, width: u32, height: u32) -> Result<VideoSource> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let frame_bytes = (width * height * 3) as usize;
    if frame_bytes == 0 || buf.len() % frame_bytes != 0 {
        return Err(Error::Video(format!(
            "raw file of {} bytes is not a whole number of {width}x{height} RGB frames",
            buf.len()
        )));
    }
    let frames = buf.chunks_exact(frame_bytes).map(|c| c.to_vec()).collect();
    VideoSource::new(width, height, frames)
}

pub fn write_raw(v: &VideoSource, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for frame in &v.frames {
        f.write_all(frame)?;
    }
    Ok(())
}

fn read_y4m(path: &Path) -> Result<VideoSource> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let header_end = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Video("y4m: missing stream header".into()))?;
    let header = std::str::from_utf8(&buf[..header_end])
        .map_err(|_| Error::Video("y4m: header is not UTF-8".into()))?;
    if !header.starts_with("YUV4MPEG2") {
        return Err(Error::Video("y4m: bad magic".into()));
    }
    let mut width = 0u32;
    let mut height = 0u32;
    for tok in header.split_ascii_whitespace().skip(1) {
        match tok.as_bytes()[0] {
            b'W' => {
                width = tok[1..]
                    .parse()
                    .map_err(|_| Error::Video(format!("y4m: bad width {tok}")))?
            }
            b'H' => {
                height = tok[1..]
                    .parse()
                    .map_err(|_| Error::Video(format!("y4m: bad height {tok}")))?
            }
            b'C' => {
                if !tok[1..].starts_with("420") {
                    return Err(Error::Video(format!(
                        "y4m: unsupported colorspace {tok}, only 4:2:0 is handled"
                    )));
                }
            }
            _ => {}
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::Video("y4m: missing dimensions".into()));
    }
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Video("y4m: 4:2:0 needs even dimensions".into()));
    }
    let (w, h) = (width as usize, height as usize);
    let ysize = w * h;
    let csize = (w / 2) * (h / 2);
    let mut pos = header_end + 1;
    let mut frames = Vec::new();
    while pos < buf.len() {
        let line_end = buf[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Video("y4m: truncated frame header".into()))?;
        let fh = &buf[pos..pos + line_end];
        if !fh.starts_with(b"FRAME") {
            return Err(Error::Video("y4m: expected FRAME marker".into()));
        }
        pos += line_end + 1;
        if pos + ysize + 2 * csize > buf.len() {
            return Err(Error::Video("y4m: truncated frame payload".into()));
        }
        let yp = &buf[pos..pos + ysize];
        let up = &buf[pos + ysize..pos + ysize + csize];
        let vp = &buf[pos + ysize + csize..pos + ysize + 2 * csize];
        frames.push(yuv420_to_rgb(yp, up, vp, w, h));
        pos += ysize + 2 * csize;
    }
    VideoSource::new(width, height, frames)
}

/// BT.601 full-range conversion with bilinear chroma upsampling
/// (chroma samples sited at the center of each 2x2 luma block).
fn yuv420_to_rgb(yp: &[u8], up: &[u8], vp: &[u8], w: usize, h: usize) -> Vec<u8> {
    let cw = w / 2;
    let ch = h / 2;
    let chroma = |plane: &[u8], x: usize, y: usize| -> f64 {
        // luma pixel center maps to chroma coordinate (x-0.5)/2, (y-0.5)/2
        let fx = (x as f64 - 0.5) / 2.0;
        let fy = (y as f64 - 0.5) / 2.0;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = fx - x0;
        let ay = fy - y0;
        let xi = |v: f64| (v as i64).clamp(0, cw as i64 - 1) as usize;
        let yi = |v: f64| (v as i64).clamp(0, ch as i64 - 1) as usize;
        let (x0c, x1c) = (xi(x0), xi(x0 + 1.0));
        let (y0c, y1c) = (yi(y0), yi(y0 + 1.0));
        let v00 = plane[y0c * cw + x0c] as f64;
        let v01 = plane[y0c * cw + x1c] as f64;
        let v10 = plane[y1c * cw + x0c] as f64;
        let v11 = plane[y1c * cw + x1c] as f64;
        (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)
    };
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let yv = yp[y * w + x] as f64;
            let u = chroma(up, x, y) - 128.0;
            let v = chroma(vp, x, y) - 128.0;
            let r = yv + 1.402 * v;
            let g = yv - 0.344136 * u - 0.714136 * v;
            let b = yv + 1.772 * u;
            let base = (y * w + x) * 3;
            out[base] = r.round().clamp(0.0, 255.0) as u8;
            out[base + 1] = g.round().clamp(0.0, 255.0) as u8;
            out[base + 2] = b.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn read_ppm_sequence(path: &Path) -> Result<VideoSource> {
    let mut files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Video(format!("no .ppm files under {}", path.display())));
    }
    let mut frames = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    for f in files.drain(..) {
        let (w, h, rgb) = read_ppm(&f)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Video(format!(
                    "{} is {w}x{h}, previous frames are {}x{}",
                    f.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        frames.push(rgb);
    }
    let (w, h) = dims.unwrap();
    VideoSource::new(w, h, frames)
}

fn read_ppm(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let token = |buf: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < buf.len() {
            if buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            } else if buf[*pos] == b'#' {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Video("ppm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
    };
    if token(&buf, &mut pos)? != "P6" {
        return Err(Error::Video("ppm: not a P6 file".into()));
    }
    let w: u32 =
        token(&buf, &mut pos)?.parse().map_err(|_| Error::Video("ppm: bad width".into()))?;
    let h: u32 =
        token(&buf, &mut pos)?.parse().map_err(|_| Error::Video("ppm: bad height".into()))?;
    let maxval: u32 =
        token(&buf, &mut pos)?.parse().map_err(|_| Error::Video("ppm: bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Video(format!("ppm: unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let n = (w * h * 3) as usize;
    if pos + n > buf.len() {
        return Err(Error::Video("ppm: truncated pixel data".into()));
    }
    Ok((w, h, buf[pos..pos + n].to_vec()))
}

pub fn write_ppm(frame: &[u8], width: u32, height: u32, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(frame)?;
    Ok(())
}

/// Writes frames as `<prefix>NNNNN.ppm` under `dir`.
pub fn write_ppm_sequence(v: &VideoSource, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in v.frames.iter().enumerate() {
        write_ppm(frame, v.width, v.height, &dir.join(format!("{prefix}{i:05}.ppm")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_test_y4m(path: &Path, w: usize, h: usize, frames: &[(u8, u8, u8)]) {
        let mut buf = format!("YUV4MPEG2 W{w} H{h} F30:1 Ip A1:1 C420\n").into_bytes();
        for &(y, u, v) in frames {
            buf.extend_from_slice(b"FRAME\n");
            buf.extend(std::iter::repeat(y).take(w * h));
            buf.extend(std::iter::repeat(u).take(w * h / 4));
            buf.extend(std::iter::repeat(v).take(w * h / 4));
        }
        std::fs::write(path, buf).unwrap();
    }

    #[test]
    fn y4m_gray_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.y4m");
        write_test_y4m(&p, 64, 64, &[(128, 128, 128)]);
        let v = read_y4m(&p).unwrap();
        assert_eq!((v.width, v.height, v.frame_count()), (64, 64, 1));
        for &b in &v.frames[0] {
            assert!((b as i32 - 128).abs() <= 1, "got {b}");
        }
    }

    #[test]
    fn y4m_header_dims_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.y4m");
        write_test_y4m(&p, 64, 64, &[(90, 100, 200)]);
        let v = read_y4m(&p).unwrap();
        assert_eq!((v.width, v.height), (64, 64));
    }

    #[test]
    fn y4m_truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.y4m");
        write_test_y4m(&p, 16, 16, &[(128, 128, 128)]);
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 10]).unwrap();
        assert!(read_y4m(&p).is_err());
    }

    #[test]
    fn raw_roundtrip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rgb");
        let frames: Vec<Vec<u8>> =
            (0..3).map(|k| (0..16 * 8 * 3).map(|i| ((i * 7 + k * 31) % 256) as u8).collect()).collect();
        let v = VideoSource::new(16, 8, frames).unwrap();
        write_raw(&v, &p).unwrap();
        let back = read_raw(&p, 16, 8).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn ppm_sequence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Vec<u8>> =
            (0..2).map(|k| (0..8 * 8 * 3).map(|i| ((i + k * 100) % 256) as u8).collect()).collect();
        let v = VideoSource::new(8, 8, frames).unwrap();
        write_ppm_sequence(&v, dir.path(), "f").unwrap();
        let back = read_ppm_sequence(dir.path()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tensor_conversion_roundtrips_8bit() {
        let frame: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let v = VideoSource::new(4, 4, vec![frame.clone()]).unwrap();
        let t = v.to_tensor::<f32>(0);
        assert_eq!(t.shape(), [1, 3, 4, 4]);
        assert_eq!(tensor_to_rgb8(&t), frame);
    }
}
