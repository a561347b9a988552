//! Two-step conditional augmented normalizing flow.
//!
//! Encoding runs two additive autoencoding transforms (A1,S1), (A2,S2) on a
//! signal lane plus an augmented latent lane, a hyper analysis producing the
//! factorized-coded hyperprior, and a hyper synthesis that combines the
//! hyperprior with condition features into the Gaussian parameters of the
//! latent. Decoding inverts the couplings starting from the condition
//! (the lossy substitution for the y2 lane). The unconditional special case
//! (no condition input, frame-type adaptation bypassed) is the I-frame
//! codec; `one_step` drops the first coupling, reducing the flow to a
//! conditional-VAE-style single transform.

use rand::Rng;

use crate::entropy::math::SIGMA_MIN;
use crate::error::{Error, Result};
use crate::nn::layers::{ConvLayer, GdnLayer};
use crate::nn::{Graph, NodeId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// B-frame type signal for frame-type adaptive coding. One-hot over
/// {reference B, non-reference B, B*}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameTypeCode {
    RefB,
    NonRefB,
    BStar,
}

impl FrameTypeCode {
    pub const ALL: [FrameTypeCode; 3] =
        [FrameTypeCode::RefB, FrameTypeCode::NonRefB, FrameTypeCode::BStar];

    pub fn index(self) -> usize {
        match self {
            FrameTypeCode::RefB => 0,
            FrameTypeCode::NonRefB => 1,
            FrameTypeCode::BStar => 2,
        }
    }

    pub fn one_hot<T: Scalar>(self) -> [T; 3] {
        let mut v = [T::zero(); 3];
        v[self.index()] = T::one();
        v
    }
}

/// Frame-type adaptation: per-type channel-wise affine applied to feature
/// maps, stored as 3xC tables for gamma and beta.
#[derive(Clone, Debug)]
pub struct FaModule {
    pub gamma_table: ParamId,
    pub beta_table: ParamId,
    pub channels: usize,
}

impl FaModule {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma_table =
            store.register(&format!("{name}.gamma"), Tensor::full([3, channels, 1, 1], T::one()))?;
        let beta_table =
            store.register(&format!("{name}.beta"), Tensor::zeros([3, channels, 1, 1]))?;
        Ok(FaModule { gamma_table, beta_table, channels })
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        m: FrameTypeCode,
    ) -> Result<NodeId> {
        fa_apply(g, store, x, m, self)
    }
}

/// `out[n,c,h,w] = gamma(M)[c] * F[n,c,h,w] + beta(M)[c]`.
pub fn fa_apply<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    m: FrameTypeCode,
    fa: &FaModule,
) -> Result<NodeId> {
    let gt = g.param(store, fa.gamma_table);
    let bt = g.param(store, fa.beta_table);
    let gamma = g.row_select(gt, m.index())?;
    let beta = g.row_select(bt, m.index())?;
    g.channel_affine(x, gamma, beta)
}

#[derive(Clone, Debug)]
enum Activation {
    None,
    Gdn(GdnLayer),
    LeakyRelu,
}

/// Conv stage: convolution, then optional frame-type adaptation, then the
/// activation (FA sits between the conv and the nonlinearity).
#[derive(Clone, Debug)]
struct Stage {
    conv: ConvLayer,
    fa: Option<FaModule>,
    act: Activation,
}

#[derive(Clone, Debug)]
struct Stack {
    stages: Vec<Stage>,
}

impl Stack {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        m: Option<FrameTypeCode>,
    ) -> Result<NodeId> {
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.conv.forward(g, store, cur)?;
            if let Some(fa) = &stage.fa {
                let mt = m.ok_or_else(|| {
                    Error::Contract("frame type required for FA-enabled network".into())
                })?;
                cur = fa.apply(g, store, cur, mt)?;
            }
            cur = match &stage.act {
                Activation::None => cur,
                Activation::Gdn(gdn) => gdn.forward(g, store, cur)?,
                Activation::LeakyRelu => g.leaky_relu(cur, 0.01),
            };
        }
        Ok(cur)
    }
}

/// One autoencoding transform: analysis net mapping concat(signal, cond)
/// into an additive latent update, synthesis net mapping the latent into an
/// additive signal update.
#[derive(Clone, Debug)]
pub struct CouplingPair {
    analysis: Stack,
    synthesis: Stack,
}

impl CouplingPair {
    /// `z' = z + mu_A(concat(x, cond) | M)`; x unchanged.
    pub fn analysis_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        z: NodeId,
        cond: Option<NodeId>,
        m: Option<FrameTypeCode>,
    ) -> Result<NodeId> {
        let input = match cond {
            Some(c) => {
                if g.value(x).height() != g.value(c).height()
                    || g.value(x).width() != g.value(c).width()
                {
                    return Err(Error::ShapeMismatch(format!(
                        "signal {:?} vs condition {:?}",
                        g.value(x).shape(),
                        g.value(c).shape()
                    )));
                }
                g.concat(&[x, c])?
            }
            None => x,
        };
        let update = self.analysis.forward(g, store, input, m)?;
        g.add(z, update)
    }

    /// `y = x - mu_S(z | M)`; z unchanged.
    pub fn synthesis_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        z: NodeId,
        m: Option<FrameTypeCode>,
    ) -> Result<NodeId> {
        let update = self.synthesis.forward(g, store, z, m)?;
        g.sub(x, update)
    }

    /// Inverse of `synthesis_step`: `x = y + mu_S(z | M)`.
    pub fn synthesis_inverse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        y: NodeId,
        z: NodeId,
        m: Option<FrameTypeCode>,
    ) -> Result<NodeId> {
        let update = self.synthesis.forward(g, store, z, m)?;
        g.add(y, update)
    }

    /// Inverse of `analysis_step`: `z = z' - mu_A(concat(x, cond) | M)`.
    pub fn analysis_inverse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        z_prime: NodeId,
        cond: Option<NodeId>,
        m: Option<FrameTypeCode>,
    ) -> Result<NodeId> {
        let input = match cond {
            Some(c) => g.concat(&[x, c])?,
            None => x,
        };
        let update = self.analysis.forward(g, store, input, m)?;
        g.sub(z_prime, update)
    }
}

/// Architecture of one CANF codec.
#[derive(Clone, Debug)]
pub struct CanfConfig {
    pub signal_channels: usize,
    /// Zero selects the unconditional (I-frame) variant.
    pub cond_channels: usize,
    pub coupling_width: usize,
    pub hyper_width: usize,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    /// Stride-2 convs per coupling net; the latent sits at 1/2^n spatially.
    pub signal_down: usize,
    /// Further stride-2 convs in the hyper nets.
    pub hyper_down: usize,
    pub one_step: bool,
    /// Per-frame-type adaptation tables; forced off when unconditional.
    pub fa: bool,
    pub factorized_support: i32,
    pub sigma_min: f64,
    /// Base kernel size of the strided convs (3 for the regular models,
    /// 2 for parameter-starved gradient-check pipelines).
    pub kernel_size: usize,
}

impl Default for CanfConfig {
    fn default() -> Self {
        CanfConfig {
            signal_channels: 3,
            cond_channels: 3,
            coupling_width: 32,
            hyper_width: 48,
            latent_channels: 32,
            hyper_channels: 32,
            signal_down: 4,
            hyper_down: 2,
            one_step: false,
            fa: true,
            factorized_support: 32,
            sigma_min: SIGMA_MIN,
            kernel_size: 3,
        }
    }
}

impl CanfConfig {
    pub fn unconditional(&self) -> bool {
        self.cond_channels == 0
    }

    /// Spatial divisor the frame dims must satisfy.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.signal_down + self.hyper_down)
    }

    pub fn latent_factor(&self) -> usize {
        1 << self.signal_down
    }

    fn fa_enabled(&self) -> bool {
        self.fa && !self.unconditional()
    }

    /// (kernel, padding) of stride-2 downsampling convs.
    fn down_kernel(&self) -> (usize, usize) {
        (self.kernel_size, (self.kernel_size - 1) / 2)
    }

    /// (kernel, padding) of stride-2 transposed convs: exact 2x upsampling.
    fn up_kernel(&self) -> (usize, usize) {
        let k = if self.kernel_size % 2 == 1 { self.kernel_size + 1 } else { self.kernel_size };
        (k, (k - 2) / 2)
    }

    /// (kernel, padding) of stride-1 convs.
    fn flat_kernel(&self) -> (usize, usize) {
        if self.kernel_size >= 3 {
            (3, 1)
        } else {
            (1, 0)
        }
    }

    pub fn validate_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.spatial_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidConfig(format!(
                "frame {h}x{w} not divisible by the model's spatial factor {f}"
            )));
        }
        Ok(())
    }
}

/// Quantization mode of the latent/hyper lanes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive U(-0.5, 0.5) noise; differentiable.
    Train,
    /// Nearest-integer rounding; produces coded symbols.
    Infer,
    /// No quantization at all (invertibility harness).
    Bypass,
}

/// Everything the encoder produces for one CANF pass.
pub struct CanfEncoding {
    pub y2: NodeId,
    pub z_hat: NodeId,
    pub h_hat: NodeId,
    pub mu: NodeId,
    pub sigma: NodeId,
    /// Pre-quantization latent (for harnesses).
    pub z2: NodeId,
    /// Rounded latent residuals (Infer mode only).
    pub residual: Option<Vec<i32>>,
    /// Rounded hyper symbols (Infer mode only).
    pub h_symbols: Option<Vec<i32>>,
}

/// Starting value of the signal lane when inverting the flow.
pub enum Y2Init {
    /// The condition tensor (standard lossy decode).
    Cond,
    /// All zeros of the given shape (unconditional / residual decode).
    Zeros([usize; 4]),
    /// An explicit y2 (invertibility harness).
    Node(NodeId),
}

#[derive(Clone, Debug)]
pub struct CanfModel {
    pub cfg: CanfConfig,
    pair1: CouplingPair,
    pair2: CouplingPair,
    hyper_analysis: Stack,
    hyper_up: Stack,
    cond_features: Option<Stack>,
    hyper_head: Stack,
    pub factorized_logits: ParamId,
}

impl CanfModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: CanfConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let pair1 = CouplingPair {
            analysis: build_analysis(store, &format!("{prefix}.a1"), &cfg, rng)?,
            synthesis: build_synthesis(store, &format!("{prefix}.s1"), &cfg, rng)?,
        };
        let pair2 = CouplingPair {
            analysis: build_analysis(store, &format!("{prefix}.a2"), &cfg, rng)?,
            synthesis: build_synthesis(store, &format!("{prefix}.s2"), &cfg, rng)?,
        };
        let hyper_analysis = build_hyper_analysis(store, &format!("{prefix}.ha"), &cfg, rng)?;
        let hyper_up = build_hyper_up(store, &format!("{prefix}.hs.up"), &cfg, rng)?;
        let cond_features = if cfg.unconditional() {
            None
        } else {
            Some(build_cond_features(store, &format!("{prefix}.hp"), &cfg, rng)?)
        };
        let hyper_head = build_hyper_head(store, &format!("{prefix}.hs.head"), &cfg, rng)?;
        let bins = (2 * cfg.factorized_support + 1) as usize;
        let factorized_logits = store.register(
            &format!("{prefix}.factorized.logits"),
            Tensor::zeros([cfg.hyper_channels, bins, 1, 1]),
        )?;
        Ok(CanfModel {
            cfg,
            pair1,
            pair2,
            hyper_analysis,
            hyper_up,
            cond_features,
            hyper_head,
            factorized_logits,
        })
    }

    fn check_cond(&self, cond: Option<NodeId>) -> Result<()> {
        match (self.cfg.unconditional(), cond) {
            (true, Some(_)) => {
                Err(Error::Contract("unconditional model takes no condition".into()))
            }
            (false, None) => Err(Error::Contract("conditional model requires a condition".into())),
            _ => Ok(()),
        }
    }

    /// Forward (encoding) pass. `m` is required iff FA is enabled.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        cond: Option<NodeId>,
        m: Option<FrameTypeCode>,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<CanfEncoding> {
        self.check_cond(cond)?;
        let [n, c, h, w] = g.value(x).shape();
        if c != self.cfg.signal_channels {
            return Err(Error::ShapeMismatch(format!(
                "signal has {c} channels, model expects {}",
                self.cfg.signal_channels
            )));
        }
        self.cfg.validate_dims(h, w)?;
        let m = if self.cfg.fa_enabled() { m } else { None };
        let zf = self.cfg.latent_factor();
        let zshape = [n, self.cfg.latent_channels, h / zf, w / zf];
        // e_z = 0
        let mut z = g.zeros(zshape);
        let mut s = x;
        if !self.cfg.one_step {
            z = self.pair1.analysis_step(g, store, s, z, cond, m)?;
            s = self.pair1.synthesis_step(g, store, s, z, m)?;
        }
        let z2 = self.pair2.analysis_step(g, store, s, z, cond, m)?;
        let h_pre = self.hyper_analysis.forward(g, store, z2, m)?;
        let (h_hat, h_symbols) = self.quantize_hyper(g, h_pre, mode, rng)?;
        let (mu, sigma) = self.hyper_reconstruct(g, store, h_hat, cond, m)?;
        let (z_hat, residual) = quantize(g, z2, mu, mode, rng)?;
        let y2 = self.pair2.synthesis_step(g, store, s, z_hat, m)?;
        Ok(CanfEncoding { y2, z_hat, h_hat, mu, sigma, z2, residual, h_symbols })
    }

    fn quantize_hyper<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h_pre: NodeId,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<(NodeId, Option<Vec<i32>>)> {
        match mode {
            QuantMode::Train => {
                let shape = g.value(h_pre).shape();
                let noise = uniform_noise::<T>(shape, rng);
                let nn = g.leaf(noise);
                Ok((g.add(h_pre, nn)?, None))
            }
            QuantMode::Infer => {
                let support = self.cfg.factorized_support;
                let vals = g.value(h_pre);
                let mut symbols = Vec::with_capacity(vals.numel());
                let mut data = Vec::with_capacity(vals.numel());
                for &v in vals.data() {
                    let k =
                        (v.as_f64().round() as i32).clamp(-support, support);
                    symbols.push(k);
                    data.push(T::from_f64(k as f64));
                }
                let t = Tensor::new(vals.shape(), data)?;
                Ok((g.leaf(t), Some(symbols)))
            }
            QuantMode::Bypass => Ok((h_pre, None)),
        }
    }

    /// Recomputes the Gaussian parameters for the latent from the quantized
    /// hyperprior and the condition: the decoder-side entry point.
    pub fn hyper_reconstruct<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_hat: NodeId,
        cond: Option<NodeId>,
        m: Option<FrameTypeCode>,
    ) -> Result<(NodeId, NodeId)> {
        self.check_cond(cond)?;
        let m = if self.cfg.fa_enabled() { m } else { None };
        let up = self.hyper_up.forward(g, store, h_hat, m)?;
        let feats = match (&self.cond_features, cond) {
            (Some(hp), Some(c)) => {
                let cf = hp.forward(g, store, c, m)?;
                g.concat(&[up, cf])?
            }
            _ => up,
        };
        let out = self.hyper_head.forward(g, store, feats, m)?;
        let zc = self.cfg.latent_channels;
        let mu = g.slice_channels(out, 0, zc)?;
        let sraw = g.slice_channels(out, zc, zc)?;
        let sigma = g.softplus(sraw, self.cfg.sigma_min);
        Ok((mu, sigma))
    }

    /// Inverts the flow from the quantized latent, starting the signal lane
    /// at `y2_init`. Returns the reconstructed signal; with
    /// `recover_augmented` also the recovered e_z lane.
    pub fn reconstruct<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_hat: NodeId,
        cond: Option<NodeId>,
        m: Option<FrameTypeCode>,
        y2_init: Y2Init,
        recover_augmented: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        self.check_cond(cond)?;
        let m = if self.cfg.fa_enabled() { m } else { None };
        let mut s = match y2_init {
            Y2Init::Cond => cond.ok_or_else(|| {
                Error::Contract("Y2Init::Cond requires a conditional model".into())
            })?,
            Y2Init::Zeros(shape) => g.zeros(shape),
            Y2Init::Node(n) => n,
        };
        s = self.pair2.synthesis_inverse(g, store, s, z_hat, m)?;
        let mut z = self.pair2.analysis_inverse(g, store, s, z_hat, cond, m)?;
        if !self.cfg.one_step {
            s = self.pair1.synthesis_inverse(g, store, s, z, m)?;
            if recover_augmented {
                z = self.pair1.analysis_inverse(g, store, s, z, cond, m)?;
                return Ok((s, Some(z)));
            }
        } else if recover_augmented {
            return Ok((s, Some(z)));
        }
        Ok((s, None))
    }
}

/// Latent quantization around the predicted mean.
///
/// Infer: `z_hat = round(z2 - mu) + mu`; the rounded residual is what gets
/// entropy-coded. Train: additive uniform noise.
pub fn quantize<T: Scalar>(
    g: &mut Graph<T>,
    z2: NodeId,
    mu: NodeId,
    mode: QuantMode,
    rng: &mut impl Rng,
) -> Result<(NodeId, Option<Vec<i32>>)> {
    match mode {
        QuantMode::Train => {
            let shape = g.value(z2).shape();
            let noise = uniform_noise::<T>(shape, rng);
            let nn = g.leaf(noise);
            Ok((g.add(z2, nn)?, None))
        }
        QuantMode::Infer => {
            let centered = g.sub(z2, mu)?;
            let rounded = g.round(centered);
            let residual: Vec<i32> =
                g.value(rounded).data().iter().map(|&v| v.as_f64() as i32).collect();
            Ok((g.add(rounded, mu)?, Some(residual)))
        }
        QuantMode::Bypass => Ok((z2, None)),
    }
}

fn uniform_noise<T: Scalar>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.gen_range(-0.5..0.5))).collect()).unwrap()
}

fn maybe_fa<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    channels: usize,
    cfg: &CanfConfig,
) -> Result<Option<FaModule>> {
    if cfg.fa_enabled() {
        Ok(Some(FaModule::new(store, name, channels)?))
    } else {
        Ok(None)
    }
}

fn build_analysis<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &CanfConfig,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let mut stages = Vec::new();
    let mut in_ch = cfg.signal_channels + cfg.cond_channels;
    for i in 0..cfg.signal_down {
        let last = i + 1 == cfg.signal_down;
        let out = if last { cfg.latent_channels } else { cfg.coupling_width };
        let base = format!("{name}.c{i}");
        let (k, p) = cfg.down_kernel();
        let conv = ConvLayer::new(store, &base, in_ch, out, k, 2, p, false, 1.0, rng)?;
        let fa = maybe_fa(store, &format!("{base}.fa"), out, cfg)?;
        let act = if last {
            Activation::None
        } else {
            Activation::Gdn(GdnLayer::new(store, &format!("{base}.gdn"), out, false)?)
        };
        stages.push(Stage { conv, fa, act });
        in_ch = out;
    }
    Ok(Stack { stages })
}

fn build_synthesis<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &CanfConfig,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let mut stages = Vec::new();
    let mut in_ch = cfg.latent_channels;
    for i in 0..cfg.signal_down {
        let last = i + 1 == cfg.signal_down;
        let out = if last { cfg.signal_channels } else { cfg.coupling_width };
        let base = format!("{name}.c{i}");
        let (k, p) = cfg.up_kernel();
        let conv = ConvLayer::new(store, &base, in_ch, out, k, 2, p, true, 1.0, rng)?;
        let fa = maybe_fa(store, &format!("{base}.fa"), out, cfg)?;
        let act = if last {
            Activation::None
        } else {
            Activation::Gdn(GdnLayer::new(store, &format!("{base}.gdn"), out, true)?)
        };
        stages.push(Stage { conv, fa, act });
        in_ch = out;
    }
    Ok(Stack { stages })
}

fn build_hyper_analysis<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &CanfConfig,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let mut stages = Vec::new();
    let c0 = format!("{name}.c0");
    let (fk, fp) = cfg.flat_kernel();
    stages.push(Stage {
        conv: ConvLayer::new(store, &c0, cfg.latent_channels, cfg.hyper_width, fk, 1, fp, false, 1.0, rng)?,
        fa: maybe_fa(store, &format!("{c0}.fa"), cfg.hyper_width, cfg)?,
        act: Activation::LeakyRelu,
    });
    let mut in_ch = cfg.hyper_width;
    let (dk, dp) = cfg.down_kernel();
    for i in 0..cfg.hyper_down {
        let last = i + 1 == cfg.hyper_down;
        let out = if last { cfg.hyper_channels } else { cfg.hyper_width };
        let base = format!("{name}.c{}", i + 1);
        stages.push(Stage {
            conv: ConvLayer::new(store, &base, in_ch, out, dk, 2, dp, false, 1.0, rng)?,
            fa: maybe_fa(store, &format!("{base}.fa"), out, cfg)?,
            act: if last { Activation::None } else { Activation::LeakyRelu },
        });
        in_ch = out;
    }
    Ok(Stack { stages })
}

fn build_hyper_up<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &CanfConfig,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let mut stages = Vec::new();
    let mut in_ch = cfg.hyper_channels;
    let (uk, up) = cfg.up_kernel();
    for i in 0..cfg.hyper_down {
        let base = format!("{name}.c{i}");
        stages.push(Stage {
            conv: ConvLayer::new(store, &base, in_ch, cfg.hyper_width, uk, 2, up, true, 1.0, rng)?,
            fa: maybe_fa(store, &format!("{base}.fa"), cfg.hyper_width, cfg)?,
            act: Activation::LeakyRelu,
        });
        in_ch = cfg.hyper_width;
    }
    Ok(Stack { stages })
}

/// Condition feature extractor feeding the hyper synthesis: a strided
/// downsampling stack from frame resolution to the latent resolution.
fn build_cond_features<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &CanfConfig,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let mut stages = Vec::new();
    let mut in_ch = cfg.cond_channels;
    let (dk, dp) = cfg.down_kernel();
    for i in 0..cfg.signal_down {
        let base = format!("{name}.c{i}");
        stages.push(Stage {
            conv: ConvLayer::new(store, &base, in_ch, cfg.hyper_width, dk, 2, dp, false, 1.0, rng)?,
            fa: maybe_fa(store, &format!("{base}.fa"), cfg.hyper_width, cfg)?,
            act: Activation::LeakyRelu,
        });
        in_ch = cfg.hyper_width;
    }
    Ok(Stack { stages })
}

fn build_hyper_head<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &CanfConfig,
    rng: &mut impl Rng,
) -> Result<Stack> {
    let in_ch = if cfg.unconditional() { cfg.hyper_width } else { 2 * cfg.hyper_width };
    let c0 = format!("{name}.c0");
    let c1 = format!("{name}.c1");
    let (fk, fp) = cfg.flat_kernel();
    Ok(Stack {
        stages: vec![
            Stage {
                conv: ConvLayer::new(store, &c0, in_ch, cfg.hyper_width, fk, 1, fp, false, 1.0, rng)?,
                fa: maybe_fa(store, &format!("{c0}.fa"), cfg.hyper_width, cfg)?,
                act: Activation::LeakyRelu,
            },
            Stage {
                conv: ConvLayer::new(
                    store,
                    &c1,
                    cfg.hyper_width,
                    2 * cfg.latent_channels,
                    fk,
                    1,
                    fp,
                    false,
                    1.0,
                    rng,
                )?,
                fa: maybe_fa(store, &format!("{c1}.fa"), 2 * cfg.latent_channels, cfg)?,
                act: Activation::None,
            },
        ],
    })
}
