//! Frame synthesis: fuse the two motion-compensated references and their
//! warped features into the predicted frame.
//!
//! A 2-scale U-shaped fusion net with an identity bypass: the residual head
//! is zero-initialized, so an untrained net reduces exactly to
//! warp-then-average.

use rand::Rng;

use crate::error::Result;
use crate::nn::layers::ConvLayer;
use crate::nn::{Graph, NodeId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SynthNet {
    // shared 2-scale feature extractor
    feat0: ConvLayer,
    feat1: ConvLayer,
    // fusion trunk
    full_in: ConvLayer,
    down: ConvLayer,
    half: ConvLayer,
    up: ConvLayer,
    fuse: ConvLayer,
    head: ConvLayer,
    frame_channels: usize,
}

impl SynthNet {
    /// `feat_width` sizes the feature extractor, `trunk_width` the fusion
    /// trunk. Defaults in the codec keep the whole net around 1e5 values.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        frame_channels: usize,
        feat_width: usize,
        trunk_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SynthNet {
            feat0: ConvLayer::new(
                store,
                &format!("{name}.feat0"),
                frame_channels,
                feat_width,
                3,
                1,
                1,
                false,
                1.0,
                rng,
            )?,
            feat1: ConvLayer::new(
                store,
                &format!("{name}.feat1"),
                feat_width,
                feat_width,
                3,
                2,
                1,
                false,
                1.0,
                rng,
            )?,
            full_in: ConvLayer::new(
                store,
                &format!("{name}.full_in"),
                2 * frame_channels + 2 * feat_width,
                trunk_width,
                3,
                1,
                1,
                false,
                1.0,
                rng,
            )?,
            down: ConvLayer::new(
                store,
                &format!("{name}.down"),
                trunk_width,
                trunk_width,
                3,
                2,
                1,
                false,
                1.0,
                rng,
            )?,
            half: ConvLayer::new(
                store,
                &format!("{name}.half"),
                trunk_width + 2 * feat_width,
                trunk_width,
                3,
                1,
                1,
                false,
                1.0,
                rng,
            )?,
            up: ConvLayer::new(
                store,
                &format!("{name}.up"),
                trunk_width,
                trunk_width,
                4,
                2,
                1,
                true,
                1.0,
                rng,
            )?,
            fuse: ConvLayer::new(
                store,
                &format!("{name}.fuse"),
                2 * trunk_width,
                trunk_width,
                3,
                1,
                1,
                false,
                1.0,
                rng,
            )?,
            head: ConvLayer::new(
                store,
                &format!("{name}.head"),
                trunk_width,
                frame_channels,
                3,
                1,
                1,
                false,
                0.0,
                rng,
            )?,
            frame_channels,
        })
    }

    /// Two-scale features of one reference frame.
    fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frame: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let s0 = self.feat0.forward(g, store, frame)?;
        let s0 = g.leaky_relu(s0, 0.01);
        let s1 = self.feat1.forward(g, store, s0)?;
        let s1 = g.leaky_relu(s1, 0.01);
        Ok((s0, s1))
    }

    /// Warps frames and features by the respective flows, fuses them, and
    /// returns the predicted frame:
    /// `0.5 * (warped_prev + warped_next) + residual`.
    pub fn synthesize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ref_prev: NodeId,
        ref_next: NodeId,
        flow_prev: NodeId,
        flow_next: NodeId,
    ) -> Result<NodeId> {
        let warped_prev = g.warp(ref_prev, flow_prev)?;
        let warped_next = g.warp(ref_next, flow_next)?;
        let (fp0, fp1) = self.features(g, store, ref_prev)?;
        let (fn0, fn1) = self.features(g, store, ref_next)?;
        let wfp0 = g.warp(fp0, flow_prev)?;
        let wfn0 = g.warp(fn0, flow_next)?;
        // half-resolution flows carry half the displacement
        let flow_prev_half = {
            let p = g.avg_pool2(flow_prev)?;
            g.scale(p, 0.5)
        };
        let flow_next_half = {
            let p = g.avg_pool2(flow_next)?;
            g.scale(p, 0.5)
        };
        let wfp1 = g.warp(fp1, flow_prev_half)?;
        let wfn1 = g.warp(fn1, flow_next_half)?;

        let full = g.concat(&[warped_prev, warped_next, wfp0, wfn0])?;
        let t0 = self.full_in.forward(g, store, full)?;
        let t0 = g.leaky_relu(t0, 0.01);
        let d = self.down.forward(g, store, t0)?;
        let d = g.leaky_relu(d, 0.01);
        let halfcat = g.concat(&[d, wfp1, wfn1])?;
        let t1 = self.half.forward(g, store, halfcat)?;
        let t1 = g.leaky_relu(t1, 0.01);
        let u = self.up.forward(g, store, t1)?;
        let u = g.leaky_relu(u, 0.01);
        let m = g.concat(&[t0, u])?;
        let m = self.fuse.forward(g, store, m)?;
        let m = g.leaky_relu(m, 0.01);
        let residual = self.head.forward(g, store, m)?;
        let avg = {
            let s = g.add(warped_prev, warped_next)?;
            g.scale(s, 0.5)
        };
        debug_assert_eq!(g.value(residual).channels(), self.frame_channels);
        g.add(avg, residual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_frame(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for v in t.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        t
    }

    fn untrained_net(store: &mut ParamStore<f32>) -> SynthNet {
        let mut rng = StdRng::seed_from_u64(11);
        SynthNet::new(store, "synth", 3, 8, 12, &mut rng).unwrap()
    }

    #[test]
    fn identity_bypass_with_equal_refs_and_zero_flows() {
        let mut store = ParamStore::new();
        let net = untrained_net(&mut store);
        let x = rand_frame(16, 16, 1);
        let mut g = Graph::new();
        let a = g.leaf(x.clone());
        let b = g.leaf(x.clone());
        let zf = g.zeros([1, 2, 16, 16]);
        let out = net.synthesize(&mut g, &store, a, b, zf, zf).unwrap();
        assert!(g.value(out).max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn bypass_averages_distinct_refs() {
        let mut store = ParamStore::new();
        let net = untrained_net(&mut store);
        let a = rand_frame(16, 16, 2);
        let b = rand_frame(16, 16, 3);
        let avg = a.zip_map(&b, |x, y| 0.5 * (x + y)).unwrap();
        let mut g = Graph::new();
        let an = g.leaf(a);
        let bn = g.leaf(b);
        let zf = g.zeros([1, 2, 16, 16]);
        let out = net.synthesize(&mut g, &store, an, bn, zf, zf).unwrap();
        assert!(g.value(out).max_abs_diff(&avg) < 1e-6);
    }

    #[test]
    fn output_shape_matches_frame() {
        let mut store = ParamStore::new();
        let net = untrained_net(&mut store);
        let mut g = Graph::new();
        let a = g.leaf(rand_frame(16, 24, 4));
        let b = g.leaf(rand_frame(16, 24, 5));
        let fp = g.zeros([1, 2, 16, 24]);
        let fnx = g.zeros([1, 2, 16, 24]);
        let out = net.synthesize(&mut g, &store, a, b, fp, fnx).unwrap();
        assert_eq!(g.value(out).shape(), [1, 3, 16, 24]);
    }

    #[test]
    fn gradients_reach_flows_and_frames() {
        // finite-difference spot checks through the whole synthesis path
        let mut store = ParamStore::<f64>::new();
        let mut rng = StdRng::seed_from_u64(12);
        let net = SynthNet::new(&mut store, "synth", 2, 4, 6, &mut rng).unwrap();
        let mk = |rng: &mut StdRng, shape: [usize; 4], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let a = mk(&mut rng, [1, 2, 8, 8], 0.0, 1.0);
        let b = mk(&mut rng, [1, 2, 8, 8], 0.0, 1.0);
        let fp = mk(&mut rng, [1, 2, 8, 8], -0.4, 0.4).map(|v| v + 0.2);
        let fnx = mk(&mut rng, [1, 2, 8, 8], -0.4, 0.4).map(|v| v + 0.2);
        let run = |a: &Tensor<f64>, fp: &Tensor<f64>| {
            let mut g = Graph::new();
            let an = g.leaf(a.clone());
            let bn = g.leaf(b.clone());
            let fpn = g.leaf(fp.clone());
            let fnn = g.leaf(fnx.clone());
            let out = net.synthesize(&mut g, &store, an, bn, fpn, fnn).unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum_all(sq);
            (g, an, fpn, loss)
        };
        let (g, an, fpn, loss) = run(&a, &fp);
        let grads = g.backward(loss).unwrap();
        let ga = grads.wrt(an).unwrap().clone();
        let gf = grads.wrt(fpn).unwrap().clone();
        let h = 1e-5;
        for &(idx, frame_side) in &[(5usize, true), (20, true), (9, false), (40, false)] {
            let (mut ap, mut fpp) = (a.clone(), fp.clone());
            let (mut am, mut fpm) = (a.clone(), fp.clone());
            if frame_side {
                ap.data_mut()[idx] += h;
                am.data_mut()[idx] -= h;
            } else {
                fpp.data_mut()[idx] += h;
                fpm.data_mut()[idx] -= h;
            }
            let (gp, _, _, lp) = run(&ap, &fpp);
            let (gm, _, _, lm) = run(&am, &fpm);
            let numeric =
                (gp.value(lp).item().unwrap() - gm.value(lm).item().unwrap()) / (2.0 * h);
            let analytic =
                if frame_side { ga.data()[idx] } else { gf.data()[idx] };
            let denom = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3,
                "idx {idx} frame_side {frame_side}: analytic {analytic}, numeric {numeric}"
            );
        }
    }
}
