//! Motion: pyramidal block-matching estimation, bidirectional motion
//! prediction, backward bilinear warping, and B*-frame virtual flows.
//!
//! The estimator is fixed preprocessing: deterministic, gradient-free, and
//! never registered in a parameter store. The predictor comes in two
//! flavors, a small learned coarse-to-fine network and a non-learned
//! fallback that scales the reference-to-reference flow by +-0.5.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::layers::ConvLayer;
use crate::nn::{Graph, NodeId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-channel displacement field in pixel units: channel 0 is dx, channel 1
/// is dy, same spatial dims as the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap<T>(pub Tensor<T>);

impl<T: Scalar> FlowMap<T> {
    pub fn zeros(batch: usize, h: usize, w: usize) -> Self {
        FlowMap(Tensor::zeros([batch, 2, h, w]))
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        if t.channels() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "flow map needs 2 channels, got {:?}",
                t.shape()
            )));
        }
        Ok(FlowMap(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    /// Elementwise sign flip, producing the B*-frame virtual counterpart.
    pub fn negate(&self) -> Self {
        FlowMap(self.0.map(|v| -v))
    }

    pub fn scale(&self, s: f64) -> Self {
        let st = T::from_f64(s);
        FlowMap(self.0.map(|v| v * st))
    }

    /// Debug dump as two raw 32-bit little-endian planes (dx then dy).
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let mut buf = Vec::with_capacity(self.0.numel() * 4);
        for &v in self.0.data() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }
}

/// Backward-warp `source` by `flow`: `out(p) = bilinear(source, p + flow(p))`
/// with border replication.
pub fn warp<T: Scalar>(source: &Tensor<T>, flow: &FlowMap<T>) -> Result<Tensor<T>> {
    kernels::warp_forward(source, flow.tensor())
}

/// Sign flip of a flow map; an involution.
pub fn make_virtual_flow<T: Scalar>(m: &FlowMap<T>) -> FlowMap<T> {
    m.negate()
}

const MIN_DIM: usize = 16;
const BLOCK: usize = 8;
const SEARCH: i64 = 4;
const PYRAMID_LEVELS: usize = 3;

/// Pyramidal block-matching motion estimation.
///
/// Returns the backward flow such that `warp(reference, flow)` approximates
/// `target`. 3 levels, +-4 px integer search per level over 8x8 blocks,
/// half-pel refinement at the finest level. Ties prefer the smaller
/// displacement, so identical frames give exactly zero flow.
pub fn estimate_flow<T: Scalar>(target: &Tensor<T>, reference: &Tensor<T>) -> Result<FlowMap<T>> {
    if target.shape() != reference.shape() {
        return Err(Error::ShapeMismatch(format!(
            "estimate_flow on {:?} vs {:?}",
            target.shape(),
            reference.shape()
        )));
    }
    let [n, _, h, w] = target.shape();
    if n != 1 {
        return Err(Error::Contract("estimate_flow takes single frames".into()));
    }
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::Contract(format!(
            "frame {h}x{w} below minimum pyramid size {MIN_DIM}x{MIN_DIM}"
        )));
    }
    let mut tgt_pyr = vec![luma(target)];
    let mut ref_pyr = vec![luma(reference)];
    for _ in 1..PYRAMID_LEVELS {
        let t = tgt_pyr.last().unwrap();
        if t.height / 2 < MIN_DIM / 2 || t.width / 2 < MIN_DIM / 2 {
            break;
        }
        tgt_pyr.push(tgt_pyr.last().unwrap().halve());
        ref_pyr.push(ref_pyr.last().unwrap().halve());
    }
    let levels = tgt_pyr.len();
    let mut flow: Option<Plane> = None;
    for li in (0..levels).rev() {
        let t = &tgt_pyr[li];
        let r = &ref_pyr[li];
        let prior = flow.map(|coarse| coarse.upsample_flow(t.height, t.width));
        flow = Some(block_match(t, r, prior.as_ref(), li == 0));
    }
    let f = flow.unwrap();
    let mut out = Tensor::zeros([1, 2, h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set(0, 0, y, x, T::from_f64(f.dx(y, x)));
            out.set(0, 1, y, x, T::from_f64(f.dy(y, x)));
        }
    }
    out.check_finite("estimated flow")?;
    Ok(FlowMap(out))
}

/// Grayscale (or interleaved flow) f64 working plane.
struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
    is_flow: bool,
}

impl Plane {
    #[inline]
    fn at(&self, y: i64, x: i64) -> f64 {
        let yy = y.clamp(0, self.height as i64 - 1) as usize;
        let xx = x.clamp(0, self.width as i64 - 1) as usize;
        self.data[yy * self.width + xx]
    }

    #[inline]
    fn dx(&self, y: usize, x: usize) -> f64 {
        self.data[2 * (y * self.width + x)]
    }

    #[inline]
    fn dy(&self, y: usize, x: usize) -> f64 {
        self.data[2 * (y * self.width + x) + 1]
    }

    fn sample(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let ay = y - y0;
        let ax = x - x0;
        let (y0, x0) = (y0 as i64, x0 as i64);
        let v00 = self.at(y0, x0);
        let v01 = self.at(y0, x0 + 1);
        let v10 = self.at(y0 + 1, x0);
        let v11 = self.at(y0 + 1, x0 + 1);
        (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)
    }

    fn halve(&self) -> Plane {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = 0.25
                    * (self.at(2 * y as i64, 2 * x as i64)
                        + self.at(2 * y as i64, 2 * x as i64 + 1)
                        + self.at(2 * y as i64 + 1, 2 * x as i64)
                        + self.at(2 * y as i64 + 1, 2 * x as i64 + 1));
            }
        }
        Plane { height: h, width: w, data, is_flow: false }
    }

    /// Nearest-neighbor upsampling of a flow plane with values doubled.
    fn upsample_flow(&self, h: usize, w: usize) -> Plane {
        debug_assert!(self.is_flow);
        let mut data = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let sy = (y * self.height / h).min(self.height - 1);
                let sx = (x * self.width / w).min(self.width - 1);
                data[2 * (y * w + x)] = 2.0 * self.dx(sy, sx);
                data[2 * (y * w + x) + 1] = 2.0 * self.dy(sy, sx);
            }
        }
        Plane { height: h, width: w, data, is_flow: true }
    }
}

fn luma<T: Scalar>(frame: &Tensor<T>) -> Plane {
    let [_, c, h, w] = frame.shape();
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for cc in 0..c {
                acc += frame.at(0, cc, y, x).as_f64();
            }
            data[y * w + x] = acc / c as f64;
        }
    }
    Plane { height: h, width: w, data, is_flow: false }
}

fn sad(tgt: &Plane, rf: &Plane, by: usize, bx: usize, dy: f64, dx: f64) -> f64 {
    let mut acc = 0.0;
    let h = tgt.height.min(by + BLOCK);
    let w = tgt.width.min(bx + BLOCK);
    let integral = dy.fract() == 0.0 && dx.fract() == 0.0;
    for y in by..h {
        for x in bx..w {
            let r = if integral {
                rf.at(y as i64 + dy as i64, x as i64 + dx as i64)
            } else {
                rf.sample(y as f64 + dy, x as f64 + dx)
            };
            acc += (tgt.data[y * tgt.width + x] - r).abs();
        }
    }
    acc
}

/// Block matching at one pyramid level around an optional prior flow.
fn block_match(tgt: &Plane, rf: &Plane, prior: Option<&Plane>, half_pel: bool) -> Plane {
    let (h, w) = (tgt.height, tgt.width);
    let mut out = vec![0.0; 2 * h * w];
    let blocks_y = h.div_ceil(BLOCK);
    let blocks_x = w.div_ceil(BLOCK);
    for byi in 0..blocks_y {
        for bxi in 0..blocks_x {
            let by = byi * BLOCK;
            let bx = bxi * BLOCK;
            let (py, px) = match prior {
                Some(p) => {
                    let cy = (by + BLOCK / 2).min(h - 1);
                    let cx = (bx + BLOCK / 2).min(w - 1);
                    (p.dy(cy, cx).round(), p.dx(cy, cx).round())
                }
                None => (0.0, 0.0),
            };
            let mut best = (f64::INFINITY, 0.0f64, 0.0f64);
            for dy in -SEARCH..=SEARCH {
                for dx in -SEARCH..=SEARCH {
                    let fy = py + dy as f64;
                    let fx = px + dx as f64;
                    let cost = sad(tgt, rf, by, bx, fy, fx);
                    // strict improvement, ties broken toward the smaller
                    // displacement, so identical frames stay at zero
                    let mag = fy * fy + fx * fx;
                    let best_mag = best.1 * best.1 + best.2 * best.2;
                    if cost < best.0 - 1e-12 || (cost < best.0 + 1e-12 && mag < best_mag) {
                        best = (cost, fy, fx);
                    }
                }
            }
            if half_pel {
                let (mut bc, mut byf, mut bxf) = best;
                for hy in [-0.5, 0.0, 0.5] {
                    for hx in [-0.5, 0.0, 0.5] {
                        if hy == 0.0 && hx == 0.0 {
                            continue;
                        }
                        let cost = sad(tgt, rf, by, bx, best.1 + hy, best.2 + hx);
                        if cost < bc - 1e-12 {
                            bc = cost;
                            byf = best.1 + hy;
                            bxf = best.2 + hx;
                        }
                    }
                }
                best = (bc, byf, bxf);
            }
            for y in by..h.min(by + BLOCK) {
                for x in bx..w.min(bx + BLOCK) {
                    out[2 * (y * w + x)] = best.2;
                    out[2 * (y * w + x) + 1] = best.1;
                }
            }
        }
    }
    Plane { height: h, width: w, data: out, is_flow: true }
}

/// Non-learned bidirectional prediction: scale the reference-to-reference
/// flow by +-0.5 (linear motion, midpoint).
pub fn fallback_bidirectional_flows<T: Scalar>(
    ref_prev: &Tensor<T>,
    ref_next: &Tensor<T>,
) -> Result<(FlowMap<T>, FlowMap<T>)> {
    let f = estimate_flow(ref_next, ref_prev)?;
    Ok((f.scale(0.5), f.scale(-0.5)))
}

/// Small 3-level coarse-to-fine motion prediction network.
///
/// Predicts both flows jointly (4 output channels) from the two reference
/// frames, refining an upsampled estimate at each finer scale. Differentiable
/// end to end, unlike the block-matching estimator.
#[derive(Clone, Debug)]
pub struct MotionPredictor {
    levels: Vec<PredLevel>, // coarsest first
}

#[derive(Clone, Debug)]
struct PredLevel {
    c1: ConvLayer,
    c2: ConvLayer,
    head: ConvLayer,
}

impl MotionPredictor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        frame_channels: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut levels = Vec::new();
        for li in 0..PYRAMID_LEVELS {
            // coarsest level sees only the refs; finer levels also take the
            // upsampled flow pair
            let in_ch = 2 * frame_channels + if li == 0 { 0 } else { 4 };
            let base = format!("{name}.l{li}");
            levels.push(PredLevel {
                c1: ConvLayer::new(
                    store,
                    &format!("{base}.c1"),
                    in_ch,
                    width,
                    3,
                    1,
                    1,
                    false,
                    1.0,
                    rng,
                )?,
                c2: ConvLayer::new(
                    store,
                    &format!("{base}.c2"),
                    width,
                    width,
                    3,
                    1,
                    1,
                    false,
                    1.0,
                    rng,
                )?,
                head: ConvLayer::new(
                    store,
                    &format!("{base}.head"),
                    width,
                    4,
                    3,
                    1,
                    1,
                    false,
                    0.0,
                    rng,
                )?,
            });
        }
        Ok(MotionPredictor { levels })
    }

    /// Returns a 4-channel node: concat(flow to previous, flow to next).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ref_prev: NodeId,
        ref_next: NodeId,
    ) -> Result<NodeId> {
        let mut prev_pyr = vec![ref_prev];
        let mut next_pyr = vec![ref_next];
        for _ in 1..self.levels.len() {
            let p = *prev_pyr.last().unwrap();
            let n = *next_pyr.last().unwrap();
            prev_pyr.push(g.avg_pool2(p)?);
            next_pyr.push(g.avg_pool2(n)?);
        }
        let mut flows: Option<NodeId> = None;
        for (li, level) in self.levels.iter().enumerate() {
            let pi = self.levels.len() - 1 - li;
            let inputs = match flows {
                None => g.concat(&[prev_pyr[pi], next_pyr[pi]])?,
                Some(f) => {
                    let up = g.upsample2(f);
                    let up = g.scale(up, 2.0);
                    flows = Some(up);
                    g.concat(&[prev_pyr[pi], next_pyr[pi], up])?
                }
            };
            let h1 = level.c1.forward(g, store, inputs)?;
            let h1 = g.leaky_relu(h1, 0.01);
            let h2 = level.c2.forward(g, store, h1)?;
            let h2 = g.leaky_relu(h2, 0.01);
            let delta = level.head.forward(g, store, h2)?;
            flows = Some(match flows {
                None => delta,
                Some(f) => g.add(f, delta)?,
            });
        }
        Ok(flows.unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    pub(crate) fn textured_frame(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut t = Tensor::zeros([1, 3, h, w]);
        let mut waves = Vec::new();
        for _ in 0..6 {
            waves.push((
                rng.gen_range(0.1..0.8f64),
                rng.gen_range(0.1..0.8f64),
                rng.gen_range(0.0..6.28f64),
                rng.gen_range(0.2..0.5f64),
            ));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.5;
                    for (i, &(fy, fx, ph, amp)) in waves.iter().enumerate() {
                        if i % 3 == c {
                            v += amp * ((fy * y as f64 + fx * x as f64 + ph).sin()) * 0.4;
                        }
                    }
                    v += rng.gen_range(-0.02..0.02);
                    t.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        t
    }

    fn circular_shift(t: &Tensor<f32>, dy: i64, dx: i64) -> Tensor<f32> {
        let [_, c, h, w] = t.shape();
        let mut out = Tensor::zeros(t.shape());
        for cc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = ((y as i64 + dy).rem_euclid(h as i64)) as usize;
                    let sx = ((x as i64 + dx).rem_euclid(w as i64)) as usize;
                    out.set(0, cc, y, x, t.at(0, cc, sy, sx));
                }
            }
        }
        out
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = textured_frame(32, 32, 1);
        let flow = estimate_flow(&f, &f).unwrap();
        let max = flow.tensor().data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(max <= 0.25, "max |flow| = {max}");
    }

    #[test]
    fn global_shift_is_recovered() {
        let f = textured_frame(48, 48, 2);
        // sampling the reference at x+2 recovers the target
        let reference = circular_shift(&f, 0, 2);
        let flow = estimate_flow(&f, &reference).unwrap();
        let mut dxs = Vec::new();
        let mut dys = Vec::new();
        for y in 8..40 {
            for x in 8..40 {
                dxs.push(flow.tensor().at(0, 0, y, x));
                dys.push(flow.tensor().at(0, 1, y, x));
            }
        }
        dxs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mdx = dxs[dxs.len() / 2];
        let mdy = dys[dys.len() / 2];
        assert!((mdx + 2.0).abs() <= 0.5, "median dx = {mdx}");
        assert!(mdy.abs() <= 0.5, "median dy = {mdy}");
    }

    #[test]
    fn noise_frames_stay_finite_and_bounded() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut a = Tensor::<f32>::zeros([1, 3, 32, 32]);
        let mut b = Tensor::<f32>::zeros([1, 3, 32, 32]);
        for v in a.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in b.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let flow = estimate_flow(&a, &b).unwrap();
        flow.tensor().check_finite("flow").unwrap();
        // three levels of +-4 px (doubled per level) plus half-pel slack
        let bound = 4.0 * (1 << PYRAMID_LEVELS) as f32;
        assert!(flow.tensor().data().iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn small_frames_are_rejected() {
        let f = Tensor::<f32>::zeros([1, 3, 8, 8]);
        assert!(estimate_flow(&f, &f).is_err());
    }

    #[test]
    fn fallback_prediction_of_equal_refs_is_zero() {
        let f = textured_frame(32, 32, 4);
        let (fp, fn_) = fallback_bidirectional_flows(&f, &f).unwrap();
        assert!(fp.tensor().data().iter().all(|&v| v.abs() <= 0.25));
        assert!(fn_.tensor().data().iter().all(|&v| v.abs() <= 0.25));
    }

    #[test]
    fn fallback_prediction_splits_global_shift() {
        let f = textured_frame(48, 48, 5);
        let prev = f.clone();
        // content moves +4 px in x from prev to next
        let next = circular_shift(&f, 0, -4);
        let (fp, fn_) = fallback_bidirectional_flows(&prev, &next).unwrap();
        let mid = |fm: &FlowMap<f32>, c: usize| {
            let mut v: Vec<f32> = (12..36)
                .flat_map(|y| (12..36).map(move |x| (y, x)))
                .map(|(y, x)| fm.tensor().at(0, c, y, x))
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let dxp = mid(&fp, 0);
        let dxn = mid(&fn_, 0);
        assert!((dxp + 2.0).abs() <= 0.5, "prev dx {dxp}");
        assert!((dxn - 2.0).abs() <= 0.5, "next dx {dxn}");
    }

    #[test]
    fn virtual_flow_is_sign_flip_and_involution() {
        let mut t = Tensor::<f32>::zeros([1, 2, 4, 4]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if i < 16 { 3.0 } else { -2.0 };
        }
        let m = FlowMap::from_tensor(t).unwrap();
        let v = make_virtual_flow(&m);
        assert!(v.tensor().data()[..16].iter().all(|&x| x == -3.0));
        assert!(v.tensor().data()[16..].iter().all(|&x| x == 2.0));
        assert_eq!(make_virtual_flow(&v), m);
        let z = FlowMap::<f32>::zeros(1, 4, 4);
        assert_eq!(make_virtual_flow(&z), z);
    }

    #[test]
    fn learned_predictor_output_shape() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let pred = MotionPredictor::new(&mut store, "pred", 3, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(textured_frame(32, 32, 7));
        let b = g.leaf(textured_frame(32, 32, 8));
        let flows = pred.forward(&mut g, &store, a, b).unwrap();
        assert_eq!(g.value(flows).shape(), [1, 4, 32, 32]);
    }

    #[test]
    fn estimator_is_deterministic() {
        let a = textured_frame(32, 32, 9);
        let b = textured_frame(32, 32, 10);
        let f1 = estimate_flow(&a, &b).unwrap();
        let f2 = estimate_flow(&a, &b).unwrap();
        assert_eq!(f1.tensor().data(), f2.tensor().data());
    }
}
