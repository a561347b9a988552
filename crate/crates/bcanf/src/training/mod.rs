//! Training: the rate-distortion-regularization objective over the 5-frame
//! schedule, the per-clip differentiable pipeline, and the optimization
//! loops for the intra codec and the B/B* codecs.

pub mod data;

use rand::Rng;

use crate::canf::{CanfModel, FrameTypeCode, QuantMode, Y2Init};
use crate::codec::{CodingMode, HypothesisMode, Models};
use crate::error::{Error, Result};
use crate::gop::{self, FrameKind};
use crate::motion;
use crate::nn::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use data::{ClipBatch, ClipSource};
use motion::FlowMap;

/// Memoized motion-estimator outputs, keyed by (purpose, target display,
/// reference display).
///
/// The estimator is stop-gradient fixed preprocessing: the analytic
/// backward treats its outputs as constants. Gradient-check harnesses pass
/// a cache so central-difference probes see exactly the same constants
/// instead of re-running the (non-differentiable) argmin on perturbed
/// reconstructions.
#[derive(Default)]
pub struct FlowCache<T> {
    map: std::collections::HashMap<(u8, u32, u32), FlowMap<T>>,
}

impl<T: Scalar> FlowCache<T> {
    pub fn new() -> Self {
        FlowCache { map: std::collections::HashMap::new() }
    }

    fn get_or_compute(
        &mut self,
        key: (u8, u32, u32),
        compute: impl FnOnce() -> Result<FlowMap<T>>,
    ) -> Result<FlowMap<T>> {
        if let Some(f) = self.map.get(&key) {
            return Ok(f.clone());
        }
        let f = compute()?;
        self.map.insert(key, f.clone());
        Ok(f)
    }
}

fn estimate_cached<T: Scalar>(
    cache: &mut Option<&mut FlowCache<T>>,
    key: (u8, u32, u32),
    target: &Tensor<T>,
    reference: &Tensor<T>,
) -> Result<FlowMap<T>> {
    match cache {
        Some(c) => c.get_or_compute(key, || motion::estimate_flow(target, reference)),
        None => motion::estimate_flow(target, reference),
    }
}

/// Rate-point and bit-allocation hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_r: f64,
    pub alpha_nr: f64,
}

pub const LAMBDA_VALUES: [f64; 4] = [128.0, 512.0, 1024.0, 2048.0];

impl LossWeights {
    pub fn new(lambda1: f64) -> Self {
        LossWeights { lambda1, lambda2: 0.01 * lambda1, alpha_r: 1.0, alpha_nr: 2.0 }
    }

    pub fn from_lambda_index(idx: u8) -> Result<Self> {
        LAMBDA_VALUES
            .get(idx as usize)
            .map(|&l| Self::new(l))
            .ok_or_else(|| Error::InvalidConfig(format!("lambda index {idx} out of range 0..=3")))
    }
}

/// Per-coded-frame loss terms: distortion (mean squared error), rate in
/// bits per pixel, and the y2 regularizer.
pub struct FrameOutcome {
    pub distortion: NodeId,
    pub rate_bpp: NodeId,
    pub regularizer: NodeId,
    /// The four per-stream rate nodes (motion hyper/latent, inter
    /// hyper/latent) whose sum, scaled per pixel, is `rate_bpp`.
    pub rate_parts: Vec<NodeId>,
}

/// The training objective:
/// `L = lambda1 * D + R + lambda2 * F` where
/// `D = d(B*) + d(refB)/alpha_r + d(chosen)/alpha_nr`, `R` is the summed
/// bpp of the three coded frames, and `F` weights the regularizers like `D`.
pub fn rd_loss<T: Scalar>(
    g: &mut Graph<T>,
    bstar: &FrameOutcome,
    refb: &FrameOutcome,
    chosen: &FrameOutcome,
    w: &LossWeights,
) -> Result<NodeId> {
    let weighted = |g: &mut Graph<T>, nodes: [NodeId; 3], w: &LossWeights| -> Result<NodeId> {
        let r = g.scale(nodes[1], 1.0 / w.alpha_r);
        let n = g.scale(nodes[2], 1.0 / w.alpha_nr);
        let s = g.add(nodes[0], r)?;
        g.add(s, n)
    };
    let d = weighted(g, [bstar.distortion, refb.distortion, chosen.distortion], w)?;
    let f = weighted(g, [bstar.regularizer, refb.regularizer, chosen.regularizer], w)?;
    let r1 = g.add(bstar.rate_bpp, refb.rate_bpp)?;
    let r = g.add(r1, chosen.rate_bpp)?;
    let ld = g.scale(d, w.lambda1);
    let lf = g.scale(f, w.lambda2);
    let s = g.add(ld, r)?;
    g.add(s, lf)
}

/// One TRAIN-mode coding pass shared by the motion and inter codecs:
/// noisy quantization, decoder-path reconstruction, and differentiable
/// rate estimates for both streams.
struct TrainPass {
    recon: NodeId,
    rate_hyper: NodeId,
    rate_latent: NodeId,
    y2: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn code_pass_train<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    model: &CanfModel,
    signal: NodeId,
    cond: Option<NodeId>,
    prediction: Option<NodeId>,
    m: Option<FrameTypeCode>,
    mode: CodingMode,
    rng: &mut impl Rng,
) -> Result<TrainPass> {
    let (input, canf_cond) = match mode {
        CodingMode::Conditional => (signal, cond),
        CodingMode::Residual => {
            let pred = prediction
                .ok_or_else(|| Error::Contract("residual mode needs a prediction".into()))?;
            (g.sub(signal, pred)?, None)
        }
    };
    let enc = model.encode(g, &models.store, input, canf_cond, m, QuantMode::Train, rng)?;
    let logits = g.param(&models.store, model.factorized_logits);
    let rate_hyper = g.rate_factorized(enc.h_hat, logits)?;
    let rate_latent = g.rate_gaussian(enc.z_hat, enc.mu, enc.sigma)?;
    let y2_init = match canf_cond {
        Some(_) => Y2Init::Cond,
        None => Y2Init::Zeros(g.value(input).shape()),
    };
    let (mut recon, _) =
        model.reconstruct(g, &models.store, enc.z_hat, canf_cond, m, y2_init, false)?;
    if mode == CodingMode::Residual {
        recon = g.add(recon, prediction.unwrap())?;
    }
    Ok(TrainPass { recon, rate_hyper, rate_latent, y2: enc.y2 })
}

/// Mean squared deviation between a node and a target node.
fn mean_sq_to<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    match b {
        Some(b) => {
            let d = g.sub(a, b)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean_all(sq))
        }
        None => {
            let sq = g.mul(a, a)?;
            Ok(g.mean_all(sq))
        }
    }
}

/// Code one B or B* frame in TRAIN mode, end to end through motion coding,
/// synthesis, and inter coding. Returns the reconstruction node (usable as
/// a reference for later frames) and the loss terms.
#[allow(clippy::too_many_arguments)]
fn train_code_frame<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    x: &Tensor<T>,
    display: u32,
    ref_displays: &[u32],
    kind: FrameKind,
    refs: &[NodeId],
    rng: &mut impl Rng,
    cache: &mut Option<&mut FlowCache<T>>,
) -> Result<(NodeId, FrameOutcome)> {
    let [_, _, h, w] = x.shape();
    let pixels = (h * w) as f64;
    let (m, xc) = match kind {
        FrameKind::BStar => {
            let rp = refs[0];
            let me = estimate_cached(cache, (0, display, ref_displays[0]), x, g.value(rp))?;
            let virt = motion::make_virtual_flow(&me);
            let me_cat = crate::tensor::concat_channels(&[me.tensor(), virt.tensor()])?;
            let signal = g.leaf(me_cat);
            let zero_flows = g.zeros([1, 4, h, w]);
            let pass = code_pass_train(
                g,
                models,
                &models.motion,
                signal,
                Some(zero_flows),
                Some(zero_flows),
                Some(FrameTypeCode::BStar),
                models.arch.motion_mode,
                rng,
            )?;
            let h1 = g.slice_channels(pass.recon, 0, 2)?;
            let h2n = g.slice_channels(pass.recon, 2, 2)?;
            let h2 = g.scale(h2n, -1.0);
            let (fa, fb) = match HypothesisMode::Both {
                HypothesisMode::Both => (h1, h2),
                HypothesisMode::First => (h1, h1),
                HypothesisMode::Second => (h2, h2),
            };
            let xc = models.synth.synthesize(g, &models.store, rp, rp, fa, fb)?;
            (FrameTypeCode::BStar, (xc, pass))
        }
        FrameKind::RefB | FrameKind::NonRefB => {
            let (rp, rn) = (refs[0], refs[1]);
            let m = if kind == FrameKind::RefB {
                FrameTypeCode::RefB
            } else {
                FrameTypeCode::NonRefB
            };
            let me_prev = estimate_cached(cache, (0, display, ref_displays[0]), x, g.value(rp))?;
            let me_next = estimate_cached(cache, (0, display, ref_displays[1]), x, g.value(rn))?;
            let flows_pred = match &models.predictor {
                Some(p) => p.forward(g, &models.store, rp, rn)?,
                None => {
                    let base = estimate_cached(
                        cache,
                        (1, ref_displays[1], ref_displays[0]),
                        g.value(rn),
                        g.value(rp),
                    )?;
                    let (fp, fn_) = (base.scale(0.5), base.scale(-0.5));
                    let cat =
                        crate::tensor::concat_channels(&[fp.tensor(), fn_.tensor()])?;
                    g.leaf(cat)
                }
            };
            let me_cat =
                crate::tensor::concat_channels(&[me_prev.tensor(), me_next.tensor()])?;
            let signal = g.leaf(me_cat);
            let pass = code_pass_train(
                g,
                models,
                &models.motion,
                signal,
                Some(flows_pred),
                Some(flows_pred),
                Some(m),
                models.arch.motion_mode,
                rng,
            )?;
            let fp = g.slice_channels(pass.recon, 0, 2)?;
            let fnx = g.slice_channels(pass.recon, 2, 2)?;
            let xc = models.synth.synthesize(g, &models.store, rp, rn, fp, fnx)?;
            (m, (xc, pass))
        }
        FrameKind::I => return Err(Error::Contract("train_code_frame on an I-frame".into())),
    };
    let (xc, motion_pass) = xc;
    let xn = g.leaf(x.clone());
    let inter_pass = code_pass_train(
        g,
        models,
        &models.inter,
        xn,
        Some(xc),
        Some(xc),
        Some(m),
        models.arch.inter_mode,
        rng,
    )?;
    let distortion = g.mse(xn, inter_pass.recon)?;
    // y2 is regularized toward its condition (zero in residual mode)
    let reg_target = match models.arch.inter_mode {
        CodingMode::Conditional => Some(xc),
        CodingMode::Residual => None,
    };
    let regularizer = mean_sq_to(g, inter_pass.y2, reg_target)?;
    let rate_parts = vec![
        motion_pass.rate_hyper,
        motion_pass.rate_latent,
        inter_pass.rate_hyper,
        inter_pass.rate_latent,
    ];
    let s1 = g.add(rate_parts[0], rate_parts[1])?;
    let s2 = g.add(s1, rate_parts[2])?;
    let bits = g.add(s2, rate_parts[3])?;
    let rate_bpp = g.scale(bits, 1.0 / pixels);
    Ok((
        inter_pass.recon,
        FrameOutcome { distortion, rate_bpp, regularizer, rate_parts },
    ))
}

/// Everything the 5-frame training forward produces.
pub struct ClipForward {
    pub loss: NodeId,
    pub bstar: FrameOutcome,
    pub refb: FrameOutcome,
    pub chosen: FrameOutcome,
    pub chosen_display: u32,
}

/// Full differentiable forward over one 5-frame clip: x0 through the frozen
/// intra codec (detached), x4 as B*, x2 as reference B, and one of x1/x3 as
/// non-reference B per the training schedule.
pub fn clip_forward<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    clip: &[Tensor<T>],
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<ClipForward> {
    clip_forward_cached(g, models, clip, weights, rng, None)
}

/// [`clip_forward`] with memoized motion estimation (gradient-check
/// harness support).
pub fn clip_forward_cached<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    clip: &[Tensor<T>],
    weights: &LossWeights,
    rng: &mut impl Rng,
    mut flow_cache: Option<&mut FlowCache<T>>,
) -> Result<ClipForward> {
    if clip.len() != 5 {
        return Err(Error::Contract(format!("5-frame clip expected, got {}", clip.len())));
    }
    // x0 through the intra codec, rounded quantization, outside the
    // training graph (pre-trained, not included for training)
    let x0_hat = {
        let mut gi = Graph::new();
        let xn = gi.leaf(clip[0].clone());
        let mut rng_i = rand::rngs::StdRng::seed_from_u64(0);
        use rand::SeedableRng;
        let enc =
            models.intra.encode(&mut gi, &models.store, xn, None, None, QuantMode::Infer, &mut rng_i)?;
        let (recon, _) = models.intra.reconstruct(
            &mut gi,
            &models.store,
            enc.z_hat,
            None,
            None,
            Y2Init::Zeros(clip[0].shape()),
            false,
        )?;
        gi.value(recon).clone()
    };
    let schedule = gop::training_schedule(rng);
    let mut recon_nodes: std::collections::HashMap<u32, NodeId> = std::collections::HashMap::new();
    recon_nodes.insert(0, g.leaf(x0_hat));
    let mut bstar = None;
    let mut refb = None;
    let mut chosen = None;
    let mut chosen_display = 0;
    for pf in schedule.coded().iter().skip(1) {
        let refs: Vec<NodeId> = pf.refs.iter().map(|r| recon_nodes[r]).collect();
        let (recon, outcome) = train_code_frame(
            g,
            models,
            &clip[pf.display_index as usize],
            pf.display_index,
            &pf.refs,
            pf.kind,
            &refs,
            rng,
            &mut flow_cache,
        )?;
        recon_nodes.insert(pf.display_index, recon);
        match pf.kind {
            FrameKind::BStar => bstar = Some(outcome),
            FrameKind::RefB => refb = Some(outcome),
            FrameKind::NonRefB => {
                chosen_display = pf.display_index;
                chosen = Some(outcome);
            }
            FrameKind::I => unreachable!(),
        }
    }
    let (bstar, refb, chosen) = (bstar.unwrap(), refb.unwrap(), chosen.unwrap());
    let loss = rd_loss(g, &bstar, &refb, &chosen, weights)?;
    Ok(ClipForward { loss, bstar, refb, chosen, chosen_display })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepMetrics {
    pub loss: f64,
    pub distortion: f64,
    pub rate_bpp: f64,
    pub regularizer: f64,
}

/// One optimization step over a batch of clips: forward each clip,
/// accumulate gradients of the batch-mean loss, and apply Adam.
pub fn train_step<T: Scalar>(
    models: &mut Models<T>,
    batch: &ClipBatch<T>,
    weights: &LossWeights,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let bs = batch.len() as f64;
    let mut metrics = StepMetrics::default();
    for clip in batch.clips() {
        let mut g = Graph::new();
        let fwd = clip_forward(&mut g, models, clip, weights, rng)?;
        let loss_val = g.value(fwd.loss).item()?.as_f64();
        if !loss_val.is_finite() {
            let diag = |o: &FrameOutcome| {
                format!(
                    "d={:?} r={:?} f={:?}",
                    g.value(o.distortion).item(),
                    g.value(o.rate_bpp).item(),
                    g.value(o.regularizer).item()
                )
            };
            return Err(Error::Training(format!(
                "non-finite loss {loss_val}; B* [{}], refB [{}], chosen x{} [{}]",
                diag(&fwd.bstar),
                diag(&fwd.refb),
                fwd.chosen_display,
                diag(&fwd.chosen)
            )));
        }
        let scaled = g.scale(fwd.loss, 1.0 / bs);
        let grads = g.backward(scaled)?;
        g.accumulate_param_grads(&grads, &mut models.store)?;
        metrics.loss += loss_val / bs;
        for o in [&fwd.bstar, &fwd.refb, &fwd.chosen] {
            metrics.distortion += g.value(o.distortion).item()?.as_f64() / bs;
            metrics.rate_bpp += g.value(o.rate_bpp).item()?.as_f64() / bs;
            metrics.regularizer += g.value(o.regularizer).item()?.as_f64() / bs;
        }
    }
    models.store.adam_step(lr);
    Ok(metrics)
}

/// Pretrain the unconditional intra codec on single frames with
/// `lambda1 * MSE + bpp + lambda2 * mean(y2^2)`.
pub fn pretrain_intra<T: Scalar>(
    models: &mut Models<T>,
    source: &ClipSource,
    steps: u32,
    batch_size: usize,
    lr: f64,
    weights: &LossWeights,
    rng: &mut impl Rng,
    mut sink: impl FnMut(u32, &StepMetrics),
) -> Result<()> {
    for step in 0..steps {
        let batch: ClipBatch<T> = source.next_batch(batch_size, rng)?;
        let bs = batch.len() as f64;
        let mut metrics = StepMetrics::default();
        for clip in batch.clips() {
            let x = &clip[2];
            let [_, _, h, w] = x.shape();
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let enc =
                models.intra.encode(&mut g, &models.store, xn, None, None, QuantMode::Train, rng)?;
            let logits = g.param(&models.store, models.intra.factorized_logits);
            let rh = g.rate_factorized(enc.h_hat, logits)?;
            let rl = g.rate_gaussian(enc.z_hat, enc.mu, enc.sigma)?;
            let (recon, _) = models.intra.reconstruct(
                &mut g,
                &models.store,
                enc.z_hat,
                None,
                None,
                Y2Init::Zeros(x.shape()),
                false,
            )?;
            let d = g.mse(xn, recon)?;
            let f = mean_sq_to(&mut g, enc.y2, None)?;
            let bits = g.add(rh, rl)?;
            let bpp = g.scale(bits, 1.0 / (h * w) as f64);
            let ld = g.scale(d, weights.lambda1);
            let lf = g.scale(f, weights.lambda2);
            let s = g.add(ld, bpp)?;
            let loss = g.add(s, lf)?;
            let lv = g.value(loss).item()?.as_f64();
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite intra loss at step {step}"
                )));
            }
            let scaled = g.scale(loss, 1.0 / bs);
            let grads = g.backward(scaled)?;
            g.accumulate_param_grads(&grads, &mut models.store)?;
            metrics.loss += lv / bs;
            metrics.distortion += g.value(d).item()?.as_f64() / bs;
            metrics.rate_bpp += g.value(bpp).item()?.as_f64() / bs;
            metrics.regularizer += g.value(f).item()?.as_f64() / bs;
        }
        models.store.adam_step(lr);
        sink(step, &metrics);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub steps: u32,
    pub batch_size: usize,
    pub lr: f64,
}

/// B/B* codec training loop. The intra codec should be pretrained and
/// frozen before calling this.
pub fn train_b_codecs<T: Scalar>(
    models: &mut Models<T>,
    source: &ClipSource,
    opts: &TrainOptions,
    weights: &LossWeights,
    rng: &mut impl Rng,
    mut sink: impl FnMut(u32, &StepMetrics),
) -> Result<()> {
    for step in 0..opts.steps {
        let batch: ClipBatch<T> = source.next_batch(opts.batch_size, rng)?;
        let metrics = train_step(models, &batch, weights, opts.lr, rng)?;
        sink(step, &metrics);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ArchConfig;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn scalar_outcome(
        g: &mut Graph<f64>,
        d: f64,
        r: f64,
        f: f64,
    ) -> FrameOutcome {
        FrameOutcome {
            distortion: g.leaf(Tensor::scalar(d)),
            rate_bpp: g.leaf(Tensor::scalar(r)),
            regularizer: g.leaf(Tensor::scalar(f)),
            rate_parts: vec![],
        }
    }

    #[test]
    fn rd_loss_hand_example() {
        // all distortions 1, no rate, no regularizer, alpha_r=1, alpha_nr=2,
        // lambda1=1: L = 1 + 1 + 0.5 = 2.5
        let mut g = Graph::new();
        let b = scalar_outcome(&mut g, 1.0, 0.0, 0.0);
        let r = scalar_outcome(&mut g, 1.0, 0.0, 0.0);
        let c = scalar_outcome(&mut g, 1.0, 0.0, 0.0);
        let w = LossWeights { lambda1: 1.0, lambda2: 0.01, alpha_r: 1.0, alpha_nr: 2.0 };
        let loss = rd_loss(&mut g, &b, &r, &c, &w).unwrap();
        assert!((g.value(loss).item().unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rd_loss_zero_terms_give_zero() {
        let mut g = Graph::new();
        let b = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let r = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let c = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let w = LossWeights::new(128.0);
        let loss = rd_loss(&mut g, &b, &r, &c, &w).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn rd_loss_folded_arithmetic() {
        // with alpha already folded into single terms:
        // L = 128*0.01 + 0.3 + 1.28*0.02 = 1.6056
        let mut g = Graph::new();
        let b = scalar_outcome(&mut g, 0.01, 0.3, 0.02);
        let r = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let c = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let w = LossWeights { lambda1: 128.0, lambda2: 1.28, alpha_r: 1.0, alpha_nr: 2.0 };
        let loss = rd_loss(&mut g, &b, &r, &c, &w).unwrap();
        assert!((g.value(loss).item().unwrap() - 1.6056).abs() < 1e-9);
    }

    #[test]
    fn rd_loss_is_linear_in_each_block() {
        let w = LossWeights::new(512.0);
        let eval = |d: f64, r: f64, f: f64| {
            let mut g = Graph::new();
            let b = scalar_outcome(&mut g, d, r, f);
            let rr = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
            let c = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
            let loss = rd_loss(&mut g, &b, &rr, &c, &w).unwrap();
            g.value(loss).item().unwrap()
        };
        let base = eval(0.3, 0.7, 0.1);
        // coefficients (lambda1, 1, lambda2)
        assert!((eval(1.3, 0.7, 0.1) - base - w.lambda1).abs() < 1e-9);
        assert!((eval(0.3, 1.7, 0.1) - base - 1.0).abs() < 1e-9);
        assert!((eval(0.3, 0.7, 1.1) - base - w.lambda2).abs() < 1e-9);
    }

    #[test]
    fn distortion_weighting_halves_nonreference_weight() {
        let w = LossWeights::new(128.0);
        assert_eq!(w.alpha_r, 1.0);
        assert_eq!(w.alpha_nr, 2.0);
        let mut g = Graph::new();
        let zero = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let zero2 = scalar_outcome(&mut g, 0.0, 0.0, 0.0);
        let hot = scalar_outcome(&mut g, 1.0, 0.0, 0.0);
        // distortion on the chosen (non-reference) frame counts half as
        // much as the same distortion on the B* frame
        let l_nonref = rd_loss(&mut g, &zero, &zero2, &hot, &w).unwrap();
        let mut g2 = Graph::new();
        let hot2 = scalar_outcome(&mut g2, 1.0, 0.0, 0.0);
        let z1 = scalar_outcome(&mut g2, 0.0, 0.0, 0.0);
        let z2 = scalar_outcome(&mut g2, 0.0, 0.0, 0.0);
        let l_bstar = rd_loss(&mut g2, &hot2, &z1, &z2, &w).unwrap();
        let a = g.value(l_nonref).item().unwrap();
        let b = g2.value(l_bstar).item().unwrap();
        assert!((b / a - 2.0).abs() < 1e-9);
    }

    fn toy_models(seed: u64) -> Models<f32> {
        Models::new(ArchConfig::toy(), seed).unwrap()
    }

    fn constant_motion_batch(seed: u64, size: usize, n: usize) -> ClipBatch<f32> {
        let mut rng = StdRng::seed_from_u64(seed);
        ClipSource::Synthetic { size }.next_batch(n, &mut rng).unwrap()
    }

    #[test]
    fn frozen_intra_receives_no_gradient() {
        let mut models = toy_models(1);
        models.freeze_intra();
        let batch = constant_motion_batch(2, 32, 1);
        let w = LossWeights::new(512.0);
        let mut rng = StdRng::seed_from_u64(3);
        // run the internals of a step so gradients are observable before
        // Adam clears them
        let mut g = Graph::new();
        let fwd = clip_forward(&mut g, &models, &batch.clips()[0], &w, &mut rng).unwrap();
        let grads = g.backward(fwd.loss).unwrap();
        g.accumulate_param_grads(&grads, &mut models.store).unwrap();
        let mut saw_intra = false;
        let mut saw_live_b = false;
        let ids: Vec<(String, _)> =
            models.store.iter_names().map(|(n, i)| (n.to_string(), i)).collect();
        for (name, id) in ids {
            let gmax =
                models.store.grad(id).data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            if name.starts_with("intra.") {
                saw_intra = true;
                assert_eq!(gmax, 0.0, "{name} accumulated gradient");
            } else if gmax > 0.0 {
                saw_live_b = true;
            }
        }
        assert!(saw_intra && saw_live_b);
    }

    #[test]
    fn train_rate_term_is_the_sum_of_all_four_streams() {
        let models = toy_models(4);
        let batch = constant_motion_batch(5, 32, 1);
        let w = LossWeights::new(512.0);
        let mut rng = StdRng::seed_from_u64(6);
        let mut g = Graph::new();
        let fwd = clip_forward(&mut g, &models, &batch.clips()[0], &w, &mut rng).unwrap();
        for o in [&fwd.bstar, &fwd.refb, &fwd.chosen] {
            assert_eq!(o.rate_parts.len(), 4);
            let total: f64 =
                o.rate_parts.iter().map(|&p| g.value(p).item().unwrap().as_f64()).sum();
            let bpp = g.value(o.rate_bpp).item().unwrap().as_f64();
            let pixels = 32.0 * 32.0;
            assert!((bpp * pixels - total).abs() <= 1e-3 * total.max(1.0));
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_constant_motion_batch() {
        let mut models = toy_models(7);
        models.freeze_intra();
        let batch = constant_motion_batch(8, 32, 1);
        let w = LossWeights::new(512.0);
        let mut rng = StdRng::seed_from_u64(9);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let m = train_step(&mut models, &batch, &w, 1e-4, &mut rng).unwrap();
            if first.is_none() {
                first = Some(m.loss);
            }
            last = m.loss;
        }
        let first = first.unwrap();
        assert!(
            last < 0.9 * first,
            "loss went from {first} to {last} over 200 steps"
        );
    }
}
