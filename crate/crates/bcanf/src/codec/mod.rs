//! Per-frame coding pipelines (I, B, B*) and the sequence driver.
//!
//! The encoder and decoder share every reconstruction code path: the
//! encoder's returned reconstruction is produced by the same functions the
//! decoder runs on the decoded symbols, so both sides are bit-identical
//! within one build.

pub mod bitstream;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::canf::{CanfConfig, CanfModel, FrameTypeCode, QuantMode, Y2Init};
use crate::entropy::{
    estimate_rate_factorized, estimate_rate_gaussian, rc_decode, rc_encode, CodedChunk,
    FactorizedModel, GaussianConditional,
};
use crate::error::{Error, Result};
use crate::gop::{self, FrameKind, GopPlan};
use crate::motion::{self, MotionPredictor};
use crate::nn::{checkpoint, Graph, NodeId, ParamStore};
use crate::scalar::Scalar;
use crate::synthesis::SynthNet;
use crate::tensor::Tensor;

pub use bitstream::{Bitstream, EncodedFrame, StreamHeader};

/// Conditional coding (the full scheme) or residual coding (the ablation:
/// code signal minus prediction with a null condition).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodingMode {
    Conditional,
    Residual,
}

/// Which decoded flow hypotheses the B*-frame synthesis consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypothesisMode {
    Both,
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Learned,
    Fallback,
}

/// Model architecture: everything needed to rebuild the parameter set.
#[derive(Clone, Debug)]
pub struct ArchConfig {
    pub frame_channels: usize,
    pub coupling_width: usize,
    pub hyper_width: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub signal_down: usize,
    pub hyper_down: usize,
    pub one_step: bool,
    pub fa: bool,
    pub kernel_size: usize,
    pub factorized_support: i32,
    pub motion_mode: CodingMode,
    pub inter_mode: CodingMode,
    pub predictor: PredictorKind,
    pub predictor_width: usize,
    pub synth_feat_width: usize,
    pub synth_trunk_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            frame_channels: 3,
            coupling_width: 32,
            hyper_width: 48,
            latent_channels: 32,
            hyper_channels: 32,
            signal_down: 4,
            hyper_down: 2,
            one_step: false,
            fa: true,
            kernel_size: 3,
            factorized_support: 32,
            motion_mode: CodingMode::Conditional,
            inter_mode: CodingMode::Conditional,
            predictor: PredictorKind::Learned,
            predictor_width: 16,
            synth_feat_width: 12,
            synth_trunk_width: 16,
        }
    }
}

impl ArchConfig {
    /// Small configuration for fast tests and toy training runs.
    pub fn toy() -> Self {
        ArchConfig {
            coupling_width: 8,
            hyper_width: 8,
            latent_channels: 8,
            hyper_channels: 8,
            signal_down: 2,
            hyper_down: 2,
            predictor: PredictorKind::Fallback,
            predictor_width: 8,
            synth_feat_width: 6,
            synth_trunk_width: 10,
            ..ArchConfig::default()
        }
    }

    /// Frame dims must be divisible by this.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.signal_down + self.hyper_down)
    }

    fn motion_cfg(&self) -> CanfConfig {
        CanfConfig {
            signal_channels: 4,
            cond_channels: if self.motion_mode == CodingMode::Conditional { 4 } else { 0 },
            coupling_width: self.coupling_width,
            hyper_width: self.hyper_width,
            latent_channels: self.latent_channels,
            hyper_channels: self.hyper_channels,
            signal_down: self.signal_down,
            hyper_down: self.hyper_down,
            one_step: self.one_step,
            fa: self.fa,
            kernel_size: self.kernel_size,
            factorized_support: self.factorized_support,
            ..CanfConfig::default()
        }
    }

    fn inter_cfg(&self) -> CanfConfig {
        CanfConfig {
            signal_channels: self.frame_channels,
            cond_channels: if self.inter_mode == CodingMode::Conditional {
                self.frame_channels
            } else {
                0
            },
            coupling_width: self.coupling_width,
            hyper_width: self.hyper_width,
            latent_channels: self.latent_channels,
            hyper_channels: self.hyper_channels,
            signal_down: self.signal_down,
            hyper_down: self.hyper_down,
            one_step: self.one_step,
            fa: self.fa,
            kernel_size: self.kernel_size,
            factorized_support: self.factorized_support,
            ..CanfConfig::default()
        }
    }

    fn intra_cfg(&self) -> CanfConfig {
        CanfConfig {
            signal_channels: self.frame_channels,
            cond_channels: 0,
            coupling_width: self.coupling_width,
            hyper_width: self.hyper_width,
            latent_channels: self.latent_channels,
            hyper_channels: self.hyper_channels,
            signal_down: self.signal_down,
            hyper_down: self.hyper_down,
            one_step: self.one_step,
            fa: false,
            kernel_size: self.kernel_size,
            factorized_support: self.factorized_support,
            ..CanfConfig::default()
        }
    }
}

/// The full model set behind one rate point: unconditional intra codec,
/// conditional motion and inter-frame codecs, frame synthesis, and the
/// optional learned motion predictor. All parameters live in one store;
/// the intra parameters are frozen after pretraining.
pub struct Models<T: Scalar> {
    pub arch: ArchConfig,
    pub store: ParamStore<T>,
    pub intra: CanfModel,
    pub motion: CanfModel,
    pub inter: CanfModel,
    pub synth: SynthNet,
    pub predictor: Option<MotionPredictor>,
}

impl<T: Scalar> Models<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let intra = CanfModel::new(&mut store, "intra", arch.intra_cfg(), &mut rng)?;
        let motion = CanfModel::new(&mut store, "motion", arch.motion_cfg(), &mut rng)?;
        let inter = CanfModel::new(&mut store, "inter", arch.inter_cfg(), &mut rng)?;
        let synth = SynthNet::new(
            &mut store,
            "synth",
            arch.frame_channels,
            arch.synth_feat_width,
            arch.synth_trunk_width,
            &mut rng,
        )?;
        let predictor = match arch.predictor {
            PredictorKind::Learned => Some(MotionPredictor::new(
                &mut store,
                "pred",
                arch.frame_channels,
                arch.predictor_width,
                &mut rng,
            )?),
            PredictorKind::Fallback => None,
        };
        Ok(Models { arch, store, intra, motion, inter, synth, predictor })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        checkpoint::load(&mut self.store, path)
    }

    /// Freeze the pretrained intra codec; it accumulates no gradients and
    /// is skipped by the optimizer from here on.
    pub fn freeze_intra(&mut self) {
        self.store.freeze_prefix("intra.");
    }
}

/// Runtime coding configuration.
#[derive(Clone, Debug)]
pub struct CodecConfig {
    pub width: u32,
    pub height: u32,
    pub gop_size: u32,
    pub intra_period: u32,
    pub lambda_index: u8,
    pub debug_checksum: bool,
    pub bstar_hypothesis: HypothesisMode,
    pub parallelism: usize,
}

impl CodecConfig {
    pub fn new(width: u32, height: u32, gop_size: u32, intra_period: u32) -> Result<Self> {
        if intra_period % gop_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "gop_size {gop_size} must divide intra_period {intra_period}"
            )));
        }
        Ok(CodecConfig {
            width,
            height,
            gop_size,
            intra_period,
            lambda_index: 0,
            debug_checksum: false,
            bstar_hypothesis: HypothesisMode::Both,
            parallelism: 1,
        })
    }
}

/// Side information produced while coding one frame, for tests and
/// profiling.
#[derive(Clone, Debug, Default)]
pub struct FrameDebug {
    /// Estimated bits per chunk, aligned with the chunk order.
    pub chunk_estimates: Vec<f64>,
    /// Decoded B* flow hypotheses (h1, h2).
    pub hypotheses: Option<(Tensor<f32>, Tensor<f32>)>,
    /// Mean |y2| of the inter/intra coding pass.
    pub y2_mean_abs: f64,
    /// Mean |signal| of the coded tensor.
    pub signal_mean_abs: f64,
}

/// Replicate-pad a frame to multiples of `factor`.
pub fn pad_frame<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    if ph == h && pw == w {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for nn in 0..n {
        for cc in 0..c {
            for y in 0..ph {
                for xx in 0..pw {
                    let v = x.at(nn, cc, y.min(h - 1), xx.min(w - 1));
                    out.set(nn, cc, y, xx, v);
                }
            }
        }
    }
    out
}

/// Crop back to the true frame size.
pub fn crop_frame<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [n, c, ph, pw] = x.shape();
    if ph == height && pw == width {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, height, width]);
    for nn in 0..n {
        for cc in 0..c {
            for y in 0..height {
                for xx in 0..width {
                    out.set(nn, cc, y, xx, x.at(nn, cc, y, xx));
                }
            }
        }
    }
    out
}

/// FNV-1a over the little-endian f32 image of a tensor.
pub fn reconstruction_checksum<T: Scalar>(t: &Tensor<T>) -> u32 {
    let mut h = 0x811c_9dc5u32;
    for &v in t.data() {
        for b in v.as_f32().to_le_bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(16_777_619);
        }
    }
    h
}

// ---------------------------------------------------------------------
// chunk construction and parsing
// ---------------------------------------------------------------------

fn symbol_bounds(symbols: &[i32]) -> (i32, i32) {
    let mut lo = 0i32;
    let mut hi = 0i32;
    for &s in symbols {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (lo, hi)
}

/// Entropy-code hyper symbols under the per-channel factorized model.
fn factorized_chunk<T: Scalar>(
    symbols: &[i32],
    logits: &Tensor<T>,
    plane: usize,
) -> Result<(CodedChunk, f64)> {
    let model = FactorizedModel::from_logits(logits)?;
    let (lo, hi) = symbol_bounds(symbols);
    let channels = model.channels();
    let tables: Vec<_> = (0..channels)
        .map(|c| model.table_for_range(c, lo, hi))
        .collect::<Result<Vec<_>>>()?;
    let channel_of = |i: usize| (i / plane) % channels;
    let chunk = rc_encode(symbols, lo, hi, channel_of, &tables)?;
    let est = estimate_rate_factorized(symbols, channel_of, &model);
    Ok((chunk, est))
}

fn decode_factorized_chunk<T: Scalar>(
    chunk: &CodedChunk,
    n_symbols: usize,
    logits: &Tensor<T>,
    plane: usize,
) -> Result<Vec<i32>> {
    let model = FactorizedModel::from_logits(logits)?;
    let (lo, hi) = (chunk.symbol_min as i32, chunk.symbol_max as i32);
    let channels = model.channels();
    let tables: Vec<_> = (0..channels)
        .map(|c| model.table_for_range(c, lo, hi))
        .collect::<Result<Vec<_>>>()?;
    rc_decode(chunk, n_symbols, |i| (i / plane) % channels, &tables)
}

/// Entropy-code latent residuals under per-element centered Gaussians.
fn gaussian_chunk<T: Scalar>(
    residuals: &[i32],
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
) -> Result<(CodedChunk, f64)> {
    let cond = GaussianConditional::new(mu, sigma)?;
    let (lo, hi) = symbol_bounds(residuals);
    let tables = cond.build_tables(lo, hi)?;
    let chunk = rc_encode(residuals, lo, hi, |i| i, &tables)?;
    let est = estimate_rate_gaussian(residuals, &cond);
    Ok((chunk, est))
}

fn decode_gaussian_chunk<T: Scalar>(
    chunk: &CodedChunk,
    n_symbols: usize,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
) -> Result<Vec<i32>> {
    let cond = GaussianConditional::new(mu, sigma)?;
    let tables = cond.build_tables(chunk.symbol_min as i32, chunk.symbol_max as i32)?;
    rc_decode(chunk, n_symbols, |i| i, &tables)
}

fn symbols_to_tensor<T: Scalar>(symbols: &[i32], shape: [usize; 4]) -> Result<Tensor<T>> {
    Tensor::new(shape, symbols.iter().map(|&s| T::from_f64(s as f64)).collect())
}

// ---------------------------------------------------------------------
// per-frame pipelines
// ---------------------------------------------------------------------

/// One CANF coding pass at inference time: quantize, entropy-code, and
/// reconstruct through the decoder path. Returns the two chunks, their rate
/// estimates, the reconstruction node, and mean |y2|.
struct CodedPass {
    hyper_chunk: CodedChunk,
    latent_chunk: CodedChunk,
    estimates: [f64; 2],
    recon: NodeId,
    y2_mean_abs: f64,
}

fn code_with_model<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    model: &CanfModel,
    signal: NodeId,
    cond: Option<NodeId>,
    prediction: Option<NodeId>,
    m: Option<FrameTypeCode>,
    mode: CodingMode,
) -> Result<CodedPass> {
    // Residual mode codes (signal - prediction) with a null condition and
    // adds the prediction back after reconstruction.
    let (input, canf_cond) = match mode {
        CodingMode::Conditional => (signal, cond),
        CodingMode::Residual => {
            let pred = prediction
                .ok_or_else(|| Error::Contract("residual mode needs a prediction".into()))?;
            (g.sub(signal, pred)?, None)
        }
    };
    let mut rng = StdRng::seed_from_u64(0); // unused in Infer mode
    let enc = model.encode(g, &models.store, input, canf_cond, m, QuantMode::Infer, &mut rng)?;
    let h_symbols = enc.h_symbols.as_ref().unwrap();
    let residuals = enc.residual.as_ref().unwrap();
    let hshape = g.value(enc.h_hat).shape();
    let (hyper_chunk, hyper_est) = factorized_chunk(
        h_symbols,
        models.store.value(model.factorized_logits),
        hshape[2] * hshape[3],
    )?;
    let (latent_chunk, latent_est) =
        gaussian_chunk(residuals, g.value(enc.mu), g.value(enc.sigma))?;
    let y2_init = match mode {
        CodingMode::Conditional => match canf_cond {
            Some(_) => Y2Init::Cond,
            None => Y2Init::Zeros(g.value(input).shape()),
        },
        CodingMode::Residual => Y2Init::Zeros(g.value(input).shape()),
    };
    let (mut recon, _) =
        model.reconstruct(g, &models.store, enc.z_hat, canf_cond, m, y2_init, false)?;
    if mode == CodingMode::Residual {
        recon = g.add(recon, prediction.unwrap())?;
    }
    let y2_mean_abs = g.value(enc.y2).mean_abs();
    Ok(CodedPass {
        hyper_chunk,
        latent_chunk,
        estimates: [hyper_est, latent_est],
        recon,
        y2_mean_abs,
    })
}

/// Decoder-side counterpart of [`code_with_model`].
fn decode_with_model<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    model: &CanfModel,
    hyper_chunk: &CodedChunk,
    latent_chunk: &CodedChunk,
    cond: Option<NodeId>,
    prediction: Option<NodeId>,
    m: Option<FrameTypeCode>,
    mode: CodingMode,
    frame_hw: (usize, usize),
    signal_channels: usize,
) -> Result<NodeId> {
    let canf_cond = match mode {
        CodingMode::Conditional => cond,
        CodingMode::Residual => None,
    };
    let (h, w) = frame_hw;
    let zf = model.cfg.latent_factor();
    let tf = 1 << (model.cfg.signal_down + model.cfg.hyper_down);
    let hshape = [1, model.cfg.hyper_channels, h / tf, w / tf];
    let zshape = [1, model.cfg.latent_channels, h / zf, w / zf];
    let n_h: usize = hshape.iter().product();
    let n_z: usize = zshape.iter().product();
    let h_symbols = decode_factorized_chunk(
        hyper_chunk,
        n_h,
        models.store.value(model.factorized_logits),
        hshape[2] * hshape[3],
    )?;
    let h_hat = g.leaf(symbols_to_tensor(&h_symbols, hshape)?);
    let (mu, sigma) = model.hyper_reconstruct(g, &models.store, h_hat, canf_cond, m)?;
    let residuals = decode_gaussian_chunk(latent_chunk, n_z, g.value(mu), g.value(sigma))?;
    let r = g.leaf(symbols_to_tensor(&residuals, zshape)?);
    let z_hat = g.add(r, mu)?;
    let y2_init = match canf_cond {
        Some(_) => Y2Init::Cond,
        None => Y2Init::Zeros([1, signal_channels, h, w]),
    };
    let (mut recon, _) =
        model.reconstruct(g, &models.store, z_hat, canf_cond, m, y2_init, false)?;
    if mode == CodingMode::Residual {
        recon = g.add(recon, prediction.unwrap())?;
    }
    Ok(recon)
}

/// Predicted bidirectional flows as one 4-channel node, identical on the
/// encoder and decoder sides (depends only on the reconstructed refs).
fn predict_flows<T: Scalar>(
    g: &mut Graph<T>,
    models: &Models<T>,
    ref_prev: NodeId,
    ref_next: NodeId,
) -> Result<NodeId> {
    match &models.predictor {
        Some(pred) => pred.forward(g, &models.store, ref_prev, ref_next),
        None => {
            let (fp, fn_) = motion::fallback_bidirectional_flows(
                g.value(ref_prev),
                g.value(ref_next),
            )?;
            let cat = crate::tensor::concat_channels(&[fp.tensor(), fn_.tensor()])?;
            Ok(g.leaf(cat))
        }
    }
}

pub struct CodedFrameResult<T> {
    pub encoded: EncodedFrame,
    pub recon: Tensor<T>,
    pub debug: FrameDebug,
}

/// Encode one I-frame with the unconditional intra codec.
pub fn encode_i_frame<T: Scalar>(
    models: &Models<T>,
    cfg: &CodecConfig,
    display_index: u32,
    x: &Tensor<T>,
) -> Result<CodedFrameResult<T>> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let pass = code_with_model(
        &mut g,
        models,
        &models.intra,
        xn,
        None,
        None,
        None,
        CodingMode::Conditional,
    )?;
    let recon = g.value(pass.recon).clone();
    let encoded = EncodedFrame {
        display_index,
        kind: FrameKind::I,
        checksum: cfg.debug_checksum.then(|| reconstruction_checksum(&recon)),
        chunks: vec![pass.hyper_chunk, pass.latent_chunk],
    };
    Ok(CodedFrameResult {
        encoded,
        recon,
        debug: FrameDebug {
            chunk_estimates: pass.estimates.to_vec(),
            hypotheses: None,
            y2_mean_abs: pass.y2_mean_abs,
            signal_mean_abs: x.mean_abs(),
        },
    })
}

/// Encode a (reference or non-reference) B-frame from two reconstructed
/// references.
pub fn encode_b_frame<T: Scalar>(
    models: &Models<T>,
    cfg: &CodecConfig,
    display_index: u32,
    x: &Tensor<T>,
    ref_prev: &Tensor<T>,
    ref_next: &Tensor<T>,
    kind: FrameKind,
) -> Result<CodedFrameResult<T>> {
    let m = match kind {
        FrameKind::RefB => FrameTypeCode::RefB,
        FrameKind::NonRefB => FrameTypeCode::NonRefB,
        other => return Err(Error::Contract(format!("encode_b_frame on {other:?}"))),
    };
    let me_prev = motion::estimate_flow(x, ref_prev)?;
    let me_next = motion::estimate_flow(x, ref_next)?;
    let mut g = Graph::new();
    let rp = g.leaf(ref_prev.clone());
    let rn = g.leaf(ref_next.clone());
    let flows_pred = predict_flows(&mut g, models, rp, rn)?;
    let me_cat =
        crate::tensor::concat_channels(&[me_prev.tensor(), me_next.tensor()])?;
    let signal = g.leaf(me_cat);
    let motion_pass = code_with_model(
        &mut g,
        models,
        &models.motion,
        signal,
        Some(flows_pred),
        Some(flows_pred),
        Some(m),
        models.arch.motion_mode,
    )?;
    let flow_prev = g.slice_channels(motion_pass.recon, 0, 2)?;
    let flow_next = g.slice_channels(motion_pass.recon, 2, 2)?;
    let xc = models.synth.synthesize(&mut g, &models.store, rp, rn, flow_prev, flow_next)?;
    let xn = g.leaf(x.clone());
    let inter_pass = code_with_model(
        &mut g,
        models,
        &models.inter,
        xn,
        Some(xc),
        Some(xc),
        Some(m),
        models.arch.inter_mode,
    )?;
    let recon = g.value(inter_pass.recon).clone();
    let encoded = EncodedFrame {
        display_index,
        kind,
        checksum: cfg.debug_checksum.then(|| reconstruction_checksum(&recon)),
        chunks: vec![
            motion_pass.hyper_chunk,
            motion_pass.latent_chunk,
            inter_pass.hyper_chunk,
            inter_pass.latent_chunk,
        ],
    };
    Ok(CodedFrameResult {
        encoded,
        recon,
        debug: FrameDebug {
            chunk_estimates: vec![
                motion_pass.estimates[0],
                motion_pass.estimates[1],
                inter_pass.estimates[0],
                inter_pass.estimates[1],
            ],
            hypotheses: None,
            y2_mean_abs: inter_pass.y2_mean_abs,
            signal_mean_abs: x.mean_abs(),
        },
    })
}

/// Encode a B*-frame from a single past reference: the estimated flow is
/// paired with its sign-reversed virtual counterpart and coded with the
/// motion prediction disabled (zero condition).
pub fn encode_bstar_frame<T: Scalar>(
    models: &Models<T>,
    cfg: &CodecConfig,
    display_index: u32,
    x: &Tensor<T>,
    ref_prev: &Tensor<T>,
    motion_lossless_bypass: bool,
) -> Result<CodedFrameResult<T>> {
    let m = FrameTypeCode::BStar;
    let me = motion::estimate_flow(x, ref_prev)?;
    let virt = motion::make_virtual_flow(&me);
    let mut g = Graph::new();
    let rp = g.leaf(ref_prev.clone());
    let [_, _, h, w] = x.shape();
    let zero_flows = g.zeros([1, 4, h, w]);
    let me_cat = crate::tensor::concat_channels(&[me.tensor(), virt.tensor()])?;
    let signal = g.leaf(me_cat);
    let (m_hat, motion_pass) = if motion_lossless_bypass {
        // test hook: reconstructed flows equal the input exactly; motion
        // chunks are empty placeholders and the frame is not decodable
        (signal, None)
    } else {
        let pass = code_with_model(
            &mut g,
            models,
            &models.motion,
            signal,
            Some(zero_flows),
            Some(zero_flows),
            Some(m),
            models.arch.motion_mode,
        )?;
        (pass.recon, Some(pass))
    };
    let h1 = g.slice_channels(m_hat, 0, 2)?;
    let h2_neg = g.slice_channels(m_hat, 2, 2)?;
    let h2 = g.scale(h2_neg, -1.0);
    let (fa, fb) = match cfg.bstar_hypothesis {
        HypothesisMode::Both => (h1, h2),
        HypothesisMode::First => (h1, h1),
        HypothesisMode::Second => (h2, h2),
    };
    let xc = models.synth.synthesize(&mut g, &models.store, rp, rp, fa, fb)?;
    let xn = g.leaf(x.clone());
    let inter_pass = code_with_model(
        &mut g,
        models,
        &models.inter,
        xn,
        Some(xc),
        Some(xc),
        Some(m),
        models.arch.inter_mode,
    )?;
    let recon = g.value(inter_pass.recon).clone();
    let hypotheses =
        Some((g.value(h1).cast::<f32>(), g.value(h2).cast::<f32>()));
    let (mh, ml, est_m) = match motion_pass {
        Some(p) => (p.hyper_chunk, p.latent_chunk, p.estimates),
        None => (
            CodedChunk { symbol_min: 0, symbol_max: 0, payload: vec![] },
            CodedChunk { symbol_min: 0, symbol_max: 0, payload: vec![] },
            [0.0, 0.0],
        ),
    };
    let encoded = EncodedFrame {
        display_index,
        kind: FrameKind::BStar,
        checksum: cfg.debug_checksum.then(|| reconstruction_checksum(&recon)),
        chunks: vec![mh, ml, inter_pass.hyper_chunk, inter_pass.latent_chunk],
    };
    Ok(CodedFrameResult {
        encoded,
        recon,
        debug: FrameDebug {
            chunk_estimates: vec![
                est_m[0],
                est_m[1],
                inter_pass.estimates[0],
                inter_pass.estimates[1],
            ],
            hypotheses,
            y2_mean_abs: inter_pass.y2_mean_abs,
            signal_mean_abs: x.mean_abs(),
        },
    })
}

/// Decode one frame given its already-reconstructed references (0 for I,
/// 1 for B*, 2 for B). Reproduces the encoder-side reconstruction
/// bit-exactly within one build.
pub fn decode_frame<T: Scalar>(
    models: &Models<T>,
    cfg: &CodecConfig,
    frame: &EncodedFrame,
    refs: &[&Tensor<T>],
) -> Result<(Tensor<T>, Option<(Tensor<f32>, Tensor<f32>)>)> {
    let expected_refs = match frame.kind {
        FrameKind::I => 0,
        FrameKind::BStar => 1,
        _ => 2,
    };
    if refs.len() != expected_refs {
        return Err(Error::Contract(format!(
            "{} frame {} needs {} references, got {}",
            frame.kind.name(),
            frame.display_index,
            expected_refs,
            refs.len()
        )));
    }
    let mut g = Graph::new();
    let mut hypotheses = None;
    let recon = match frame.kind {
        FrameKind::I => {
            let f = models.arch.spatial_factor();
            let ph = cfg.height as usize;
            let pw = cfg.width as usize;
            let (ph, pw) = (ph.div_ceil(f) * f, pw.div_ceil(f) * f);
            decode_with_model(
                &mut g,
                models,
                &models.intra,
                &frame.chunks[0],
                &frame.chunks[1],
                None,
                None,
                None,
                CodingMode::Conditional,
                (ph, pw),
                models.arch.frame_channels,
            )?
        }
        FrameKind::RefB | FrameKind::NonRefB => {
            let m = if frame.kind == FrameKind::RefB {
                FrameTypeCode::RefB
            } else {
                FrameTypeCode::NonRefB
            };
            let [_, _, h, w] = refs[0].shape();
            let rp = g.leaf(refs[0].clone());
            let rn = g.leaf(refs[1].clone());
            let flows_pred = predict_flows(&mut g, models, rp, rn)?;
            let m_hat = decode_with_model(
                &mut g,
                models,
                &models.motion,
                &frame.chunks[0],
                &frame.chunks[1],
                Some(flows_pred),
                Some(flows_pred),
                Some(m),
                models.arch.motion_mode,
                (h, w),
                4,
            )?;
            let flow_prev = g.slice_channels(m_hat, 0, 2)?;
            let flow_next = g.slice_channels(m_hat, 2, 2)?;
            let xc =
                models.synth.synthesize(&mut g, &models.store, rp, rn, flow_prev, flow_next)?;
            decode_with_model(
                &mut g,
                models,
                &models.inter,
                &frame.chunks[2],
                &frame.chunks[3],
                Some(xc),
                Some(xc),
                Some(m),
                models.arch.inter_mode,
                (h, w),
                models.arch.frame_channels,
            )?
        }
        FrameKind::BStar => {
            let m = FrameTypeCode::BStar;
            let [_, _, h, w] = refs[0].shape();
            let rp = g.leaf(refs[0].clone());
            let zero_flows = g.zeros([1, 4, h, w]);
            let m_hat = decode_with_model(
                &mut g,
                models,
                &models.motion,
                &frame.chunks[0],
                &frame.chunks[1],
                Some(zero_flows),
                Some(zero_flows),
                Some(m),
                models.arch.motion_mode,
                (h, w),
                4,
            )?;
            let h1 = g.slice_channels(m_hat, 0, 2)?;
            let h2_neg = g.slice_channels(m_hat, 2, 2)?;
            let h2 = g.scale(h2_neg, -1.0);
            hypotheses = Some((g.value(h1).cast::<f32>(), g.value(h2).cast::<f32>()));
            let (fa, fb) = match cfg.bstar_hypothesis {
                HypothesisMode::Both => (h1, h2),
                HypothesisMode::First => (h1, h1),
                HypothesisMode::Second => (h2, h2),
            };
            let xc = models.synth.synthesize(&mut g, &models.store, rp, rp, fa, fb)?;
            decode_with_model(
                &mut g,
                models,
                &models.inter,
                &frame.chunks[2],
                &frame.chunks[3],
                Some(xc),
                Some(xc),
                Some(m),
                models.arch.inter_mode,
                (h, w),
                models.arch.frame_channels,
            )?
        }
    };
    let out = g.value(recon).clone();
    if let Some(expect) = frame.checksum {
        let got = reconstruction_checksum(&out);
        if got != expect {
            return Err(Error::Decode(format!(
                "reconstruction checksum mismatch on frame {} ({got:#010x} vs {expect:#010x})",
                frame.display_index
            )));
        }
    }
    Ok((out, hypotheses))
}

// ---------------------------------------------------------------------
// sequence driver
// ---------------------------------------------------------------------

pub struct EncodeResult<T> {
    pub bitstream: Bitstream,
    /// Encoder-side reconstructions at padded dims, by display index.
    pub reconstructions: Vec<Tensor<T>>,
    /// Per-frame debug info, by display index.
    pub debug: Vec<FrameDebug>,
    pub plan: GopPlan,
}

/// Partition the coding order into waves of frames whose references were
/// all coded in earlier waves; frames within a wave are independent.
fn waves(plan: &GopPlan) -> Vec<Vec<usize>> {
    let mut done: std::collections::HashSet<u32> = std::collections::HashSet::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_displays: std::collections::HashSet<u32> = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, f) in plan.coded().iter().enumerate() {
        let blocked = f.refs.iter().any(|r| current_displays.contains(r));
        if blocked {
            done.extend(current_displays.drain());
            out.push(std::mem::take(&mut current));
        }
        current.push(i);
        current_displays.insert(f.display_index);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn encode_one<T: Scalar>(
    models: &Models<T>,
    cfg: &CodecConfig,
    plan_frame: &crate::gop::FramePlan,
    frames: &[Tensor<T>],
    recon: &[Option<Tensor<T>>],
) -> Result<CodedFrameResult<T>> {
    let d = plan_frame.display_index;
    let x = &frames[d as usize];
    match plan_frame.kind {
        FrameKind::I => encode_i_frame(models, cfg, d, x),
        FrameKind::BStar => {
            let rp = recon[plan_frame.refs[0] as usize].as_ref().unwrap();
            encode_bstar_frame(models, cfg, d, x, rp, false)
        }
        kind => {
            let rp = recon[plan_frame.refs[0] as usize].as_ref().unwrap();
            let rn = recon[plan_frame.refs[1] as usize].as_ref().unwrap();
            encode_b_frame(models, cfg, d, x, rp, rn, kind)
        }
    }
}

/// Encode a whole sequence. Frames are the source frames in display order;
/// they are padded internally to the model's spatial factor.
pub fn encode_sequence<T: Scalar>(
    models: &Models<T>,
    cfg: &CodecConfig,
    source_frames: &[Tensor<T>],
) -> Result<EncodeResult<T>> {
    let n = source_frames.len() as u32;
    let plan = gop::plan(n, cfg.gop_size, cfg.intra_period)?;
    let factor = models.arch.spatial_factor();
    let frames: Vec<Tensor<T>> =
        source_frames.iter().map(|f| pad_frame(f, factor)).collect();
    let mut recon: Vec<Option<Tensor<T>>> = vec![None; n as usize];
    let mut debug: Vec<FrameDebug> = vec![FrameDebug::default(); n as usize];
    let mut encoded: Vec<Option<EncodedFrame>> = vec![None; n as usize];
    let pool = if cfg.parallelism > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.parallelism)
                .build()
                .map_err(|e| Error::Contract(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    for wave in waves(&plan) {
        let results: Vec<Result<CodedFrameResult<T>>> = match (&pool, wave.len()) {
            (Some(pool), len) if len > 1 => pool.install(|| {
                wave.par_iter()
                    .map(|&i| encode_one(models, cfg, &plan.coded()[i], &frames, &recon))
                    .collect()
            }),
            _ => wave
                .iter()
                .map(|&i| encode_one(models, cfg, &plan.coded()[i], &frames, &recon))
                .collect(),
        };
        for (&i, r) in wave.iter().zip(results) {
            let r = r?;
            let d = plan.coded()[i].display_index as usize;
            recon[d] = Some(r.recon);
            debug[d] = r.debug;
            encoded[d] = Some(r.encoded);
        }
    }
    let frames_in_coding_order: Vec<EncodedFrame> = plan
        .coded()
        .iter()
        .map(|f| encoded[f.display_index as usize].clone().unwrap())
        .collect();
    let bitstream = Bitstream {
        header: StreamHeader {
            width: cfg.width as u16,
            height: cfg.height as u16,
            gop_size: cfg.gop_size as u8,
            intra_period: cfg.intra_period as u16,
            frame_count: n,
            lambda_index: cfg.lambda_index,
        },
        frames: frames_in_coding_order,
    };
    Ok(EncodeResult {
        bitstream,
        reconstructions: recon.into_iter().map(|r| r.unwrap()).collect(),
        debug,
        plan,
    })
}

/// Decode a whole bitstream. Returns reconstructions at padded dims in
/// display order (crop with [`crop_frame`] for output).
pub fn decode_sequence<T: Scalar>(
    models: &Models<T>,
    stream: &Bitstream,
) -> Result<Vec<Tensor<T>>> {
    decode_sequence_with(models, stream, HypothesisMode::Both)
}

/// [`decode_sequence`] with an explicit B* hypothesis mode; must match the
/// mode the stream was encoded with.
pub fn decode_sequence_with<T: Scalar>(
    models: &Models<T>,
    stream: &Bitstream,
    bstar_hypothesis: HypothesisMode,
) -> Result<Vec<Tensor<T>>> {
    let h = &stream.header;
    let cfg = CodecConfig {
        width: h.width as u32,
        height: h.height as u32,
        gop_size: h.gop_size as u32,
        intra_period: h.intra_period as u32,
        lambda_index: h.lambda_index,
        debug_checksum: false,
        bstar_hypothesis,
        parallelism: 1,
    };
    let plan = gop::plan(h.frame_count, cfg.gop_size, cfg.intra_period)?;
    let mut recon: Vec<Option<Tensor<T>>> = vec![None; h.frame_count as usize];
    for (i, frame) in stream.frames.iter().enumerate() {
        let pf = &plan.coded()[i];
        if pf.display_index != frame.display_index || pf.kind != frame.kind {
            return Err(Error::Bitstream(format!(
                "frame {} in stream order {i} does not match the plan ({} {})",
                frame.display_index,
                pf.display_index,
                pf.kind.name()
            )));
        }
        let refs: Vec<&Tensor<T>> =
            pf.refs.iter().map(|&r| recon[r as usize].as_ref().unwrap()).collect();
        let (out, _) = decode_frame(models, &cfg, frame, &refs)?;
        recon[frame.display_index as usize] = Some(out);
    }
    Ok(recon.into_iter().map(|r| r.unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn moving_frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f32>> {
        let canvas = crate::training::data::texture_canvas(2 * h, 2 * w, seed);
        (0..n)
            .map(|t| {
                crate::training::data::crop_at(
                    &canvas,
                    8.0 + 1.5 * t as f64,
                    6.0 + 0.7 * t as f64,
                    h,
                    w,
                )
            })
            .collect()
    }

    fn toy_models(seed: u64) -> Models<f32> {
        Models::new(ArchConfig::toy(), seed).unwrap()
    }

    #[test]
    fn i_frame_roundtrip_is_bit_exact() {
        let models = toy_models(1);
        let cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        let x = moving_frames(1, 32, 32, 2).remove(0);
        let r = encode_i_frame(&models, &cfg, 0, &x).unwrap();
        let (decoded, _) = decode_frame(&models, &cfg, &r.encoded, &[]).unwrap();
        assert_eq!(decoded.data(), r.recon.data());
    }

    #[test]
    fn b_frame_roundtrip_is_bit_exact() {
        let models = toy_models(3);
        let cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        let fs = moving_frames(3, 32, 32, 4);
        let r0 = encode_i_frame(&models, &cfg, 0, &fs[0]).unwrap();
        let r2 = encode_bstar_frame(&models, &cfg, 2, &fs[2], &r0.recon, false).unwrap();
        let r1 = encode_b_frame(
            &models,
            &cfg,
            1,
            &fs[1],
            &r0.recon,
            &r2.recon,
            FrameKind::NonRefB,
        )
        .unwrap();
        let (d2, hyp) = decode_frame(&models, &cfg, &r2.encoded, &[&r0.recon]).unwrap();
        assert_eq!(d2.data(), r2.recon.data());
        assert!(hyp.is_some());
        let (d1, _) = decode_frame(&models, &cfg, &r1.encoded, &[&r0.recon, &r2.recon]).unwrap();
        assert_eq!(d1.data(), r1.recon.data());
    }

    #[test]
    fn motion_chunk_codes_four_channels() {
        // the jointly coded motion tensor stacks two 2-channel flows
        let models = toy_models(5);
        assert_eq!(models.motion.cfg.signal_channels, 4);
        assert_eq!(models.motion.cfg.cond_channels, 4);
    }

    #[test]
    fn bstar_bypass_hook_gives_exactly_opposite_hypotheses() {
        let models = toy_models(7);
        let cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        let fs = moving_frames(2, 32, 32, 8);
        let r0 = encode_i_frame(&models, &cfg, 0, &fs[0]).unwrap();
        let r = encode_bstar_frame(&models, &cfg, 1, &fs[1], &r0.recon, true).unwrap();
        let (h1, h2) = r.debug.hypotheses.unwrap();
        // h2 = -(-h1) = h1 exactly under the lossless bypass
        assert_eq!(h1.data(), h2.data());
    }

    #[test]
    fn wrong_reference_is_caught_by_checksum() {
        let models = toy_models(9);
        let mut cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        cfg.debug_checksum = true;
        let fs = moving_frames(3, 32, 32, 10);
        let r0 = encode_i_frame(&models, &cfg, 0, &fs[0]).unwrap();
        let r2 = encode_bstar_frame(&models, &cfg, 2, &fs[2], &r0.recon, false).unwrap();
        // correct reference decodes
        assert!(decode_frame(&models, &cfg, &r2.encoded, &[&r0.recon]).is_ok());
        // wrong reference produces a different reconstruction: checksum trips
        let err = decode_frame(&models, &cfg, &r2.encoded, &[&fs[1]]);
        assert!(matches!(err, Err(Error::Decode(_))));
    }

    #[test]
    fn sequence_roundtrip_and_serialization() {
        let models = toy_models(11);
        let mut cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        cfg.lambda_index = 2;
        let fs = moving_frames(5, 32, 32, 12);
        let enc = encode_sequence(&models, &cfg, &fs).unwrap();
        assert_eq!(enc.bitstream.frames.len(), 5);
        let bytes = enc.bitstream.serialize();
        let back = Bitstream::deserialize(&bytes).unwrap();
        assert_eq!(back, enc.bitstream);
        let dec = decode_sequence(&models, &back).unwrap();
        for (d, e) in dec.iter().zip(&enc.reconstructions) {
            assert_eq!(d.data(), e.data());
        }
    }

    #[test]
    fn parallel_encode_is_byte_identical_to_serial() {
        let models = toy_models(13);
        let mut cfg = CodecConfig::new(32, 32, 4, 8).unwrap();
        let fs = moving_frames(9, 32, 32, 14);
        cfg.parallelism = 1;
        let serial = encode_sequence(&models, &cfg, &fs).unwrap().bitstream.serialize();
        cfg.parallelism = 4;
        let parallel = encode_sequence(&models, &cfg, &fs).unwrap().bitstream.serialize();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn residual_mode_roundtrips_too() {
        let mut arch = ArchConfig::toy();
        arch.motion_mode = CodingMode::Residual;
        arch.inter_mode = CodingMode::Residual;
        let models = Models::<f32>::new(arch, 15).unwrap();
        let cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        let fs = moving_frames(5, 32, 32, 16);
        let enc = encode_sequence(&models, &cfg, &fs).unwrap();
        let dec = decode_sequence(&models, &enc.bitstream).unwrap();
        for (d, e) in dec.iter().zip(&enc.reconstructions) {
            assert_eq!(d.data(), e.data());
        }
    }

    #[test]
    fn rate_estimates_track_actual_chunk_sizes() {
        let models = toy_models(17);
        let cfg = CodecConfig::new(32, 32, 2, 4).unwrap();
        let fs = moving_frames(5, 32, 32, 18);
        let enc = encode_sequence(&models, &cfg, &fs).unwrap();
        for (d, frame) in enc.bitstream.frames.iter().enumerate() {
            let est = &enc.debug[frame.display_index as usize].chunk_estimates;
            for (c, chunk) in frame.chunks.iter().enumerate() {
                let actual = chunk.payload_bits() as f64;
                let allowed = est[c] * 0.01 + 256.0;
                assert!(
                    (actual - est[c]).abs() <= allowed,
                    "frame {d} chunk {c}: actual {actual}, estimate {}",
                    est[c]
                );
            }
        }
    }

    #[test]
    fn padded_dims_work_end_to_end() {
        // 30x20 frames pad to the toy factor of 16
        let models = toy_models(19);
        let cfg = CodecConfig::new(20, 30, 2, 4).unwrap();
        let mut rng = StdRng::seed_from_u64(20);
        let fs: Vec<Tensor<f32>> = (0..3)
            .map(|_| {
                let mut t = Tensor::zeros([1, 3, 30, 20]);
                for v in t.data_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                t
            })
            .collect();
        let enc = encode_sequence(&models, &cfg, &fs).unwrap();
        let dec = decode_sequence(&models, &enc.bitstream).unwrap();
        assert_eq!(dec[0].shape(), [1, 3, 32, 32]);
        let cropped = crop_frame(&dec[0], 30, 20);
        assert_eq!(cropped.shape(), [1, 3, 30, 20]);
    }
}
