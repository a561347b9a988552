//! Rate-distortion metrics: PSNR, bits per pixel, and Bjontegaard delta
//! rate over monotone piecewise-cubic (PCHIP) interpolation of log-rate
//! versus quality.

use crate::error::{Error, Result};
use crate::gop::FrameKind;

/// PSNR between two 8-bit frames, in dB, capped at 99.0 for identical
/// content.
pub fn psnr(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "psnr over {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as i64 - y as i64;
        acc += (d * d) as u64;
    }
    if acc == 0 {
        return Ok(99.0);
    }
    let mse = acc as f64 / a.len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(99.0))
}

/// Bits per pixel of a frame payload.
pub fn bpp(payload_bytes: u64, width: u32, height: u32) -> f64 {
    8.0 * payload_bytes as f64 / (width as f64 * height as f64)
}

/// A rate-distortion curve: (bpp, psnr) points sorted by bpp, strictly
/// increasing in both coordinates.
#[derive(Clone, Debug)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Contract(format!(
                    "RD curve must be strictly increasing in bpp and PSNR: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if points.iter().any(|p| p.0 <= 0.0) {
            return Err(Error::Contract("non-positive bpp in RD curve".into()));
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        (self.points[0].1, self.points[self.points.len() - 1].1)
    }
}

/// Bjontegaard delta rate of `test` against `anchor`, in percent.
///
/// Interpolates ln(bpp) against PSNR with monotone piecewise-cubic Hermite
/// splines, integrates both over the common PSNR interval, and returns
/// `100 * (exp(mean delta ln rate) - 1)`.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    for (name, c) in [("anchor", anchor), ("test", test)] {
        if c.points.len() < 4 {
            return Err(Error::Contract(format!(
                "{name} curve has {} points, need at least 4",
                c.points.len()
            )));
        }
    }
    let (a_lo, a_hi) = anchor.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if lo >= hi {
        return Err(Error::Contract(format!(
            "no PSNR overlap between curves ([{a_lo}, {a_hi}] vs [{t_lo}, {t_hi}])"
        )));
    }
    let int_anchor = Pchip::fit(&anchor.points)?.integrate(lo, hi);
    let int_test = Pchip::fit(&test.points)?.integrate(lo, hi);
    let avg = (int_test - int_anchor) / (hi - lo);
    Ok(100.0 * (avg.exp() - 1.0))
}

/// Monotone cubic Hermite interpolant of ln(bpp) vs PSNR
/// (Fritsch-Carlson derivative estimates).
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Pchip {
    fn fit(points: &[(f64, f64)]) -> Result<Self> {
        let x: Vec<f64> = points.iter().map(|p| p.1).collect();
        let y: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        m[0] = edge_derivative(h[0], h.get(1).copied().unwrap_or(h[0]), d[0], d.get(1).copied().unwrap_or(d[0]));
        m[n - 1] = edge_derivative(
            h[n - 2],
            h.get(n.wrapping_sub(3)).copied().unwrap_or(h[n - 2]),
            d[n - 2],
            d.get(n.wrapping_sub(3)).copied().unwrap_or(d[n - 2]),
        );
        Ok(Pchip { x, y, m })
    }

    /// Exact integral of the piecewise cubic over [lo, hi], assumed inside
    /// the knot range.
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let n = self.x.len();
        let mut total = 0.0;
        for i in 0..n - 1 {
            let (x0, x1) = (self.x[i], self.x[i + 1]);
            let a = lo.max(x0);
            let b = hi.min(x1);
            if a >= b {
                continue;
            }
            let h = x1 - x0;
            let t0 = (a - x0) / h;
            let t1 = (b - x0) / h;
            total += h
                * (self.y[i] * (ih00(t1) - ih00(t0))
                    + h * self.m[i] * (ih10(t1) - ih10(t0))
                    + self.y[i + 1] * (ih01(t1) - ih01(t0))
                    + h * self.m[i + 1] * (ih11(t1) - ih11(t0)));
        }
        total
    }
}

/// One-sided three-point endpoint derivative with the standard PCHIP
/// monotonicity clamps.
fn edge_derivative(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let mut m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        m = 0.0;
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        m = 3.0 * d0;
    }
    m
}

// Antiderivatives of the cubic Hermite basis on [0, 1].
fn ih00(t: f64) -> f64 {
    0.5 * t.powi(4) - t.powi(3) + t
}
fn ih10(t: f64) -> f64 {
    0.25 * t.powi(4) - 2.0 / 3.0 * t.powi(3) + 0.5 * t * t
}
fn ih01(t: f64) -> f64 {
    -0.5 * t.powi(4) + t.powi(3)
}
fn ih11(t: f64) -> f64 {
    0.25 * t.powi(4) - t.powi(3) / 3.0
}

/// One row of the per-frame coding profile.
#[derive(Clone, Debug)]
pub struct ProfileRow {
    pub display_index: u32,
    pub kind: FrameKind,
    pub payload_bits: u64,
    pub bpp: f64,
    pub psnr: f64,
}

/// Per-frame profile plus per-type aggregates, as CSV.
pub fn profile_report(rows: &[ProfileRow]) -> String {
    let mut out = String::from("display_index,frame_type,bits,bpp,psnr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.4}\n",
            r.display_index,
            r.kind.name(),
            r.payload_bits,
            r.bpp,
            r.psnr
        ));
    }
    for kind in [FrameKind::I, FrameKind::RefB, FrameKind::NonRefB, FrameKind::BStar] {
        let members: Vec<&ProfileRow> = rows.iter().filter(|r| r.kind == kind).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let bits: u64 = members.iter().map(|r| r.payload_bits).sum();
        let bpp: f64 = members.iter().map(|r| r.bpp).sum::<f64>() / n;
        let psnr: f64 = members.iter().map(|r| r.psnr).sum::<f64>() / n;
        out.push_str(&format!(
            "aggregate,{},{},{:.6},{:.4}\n",
            kind.name(),
            bits,
            bpp,
            psnr
        ));
    }
    out
}

/// Parses a curve CSV with `bpp,psnr` rows (header optional).
pub fn parse_curve_csv(text: &str) -> Result<RdCurve> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let a = parts.next().unwrap_or("").trim();
        let b = parts.next().unwrap_or("").trim();
        if i == 0 && a.parse::<f64>().is_err() {
            continue; // header
        }
        let bpp: f64 = a
            .parse()
            .map_err(|_| Error::Contract(format!("bad bpp on line {}: {a}", i + 1)))?;
        let psnr: f64 = b
            .parse()
            .map_err(|_| Error::Contract(format!("bad psnr on line {}: {b}", i + 1)))?;
        points.push((bpp, psnr));
    }
    RdCurve::new(points)
}
