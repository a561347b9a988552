//! Command-line interface: GOP planning, training, encoding, decoding,
//! evaluation, and BD-rate computation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::SeedableRng;

use bcanf::codec::{
    self, ArchConfig, Bitstream, CodecConfig, CodingMode, HypothesisMode, Models, PredictorKind,
};
use bcanf::error::Error;
use bcanf::gop;
use bcanf::metrics::{self, ProfileRow, RdCurve};
use bcanf::training::{self, data::ClipSource, LossWeights, TrainOptions};
use bcanf::video::{self, VideoFormat, VideoSource};
use bcanf::Tensor32;

#[derive(Parser)]
#[command(name = "bcanf", version, about = "Learned B-frame video codec")]
struct Cli {
    /// Plain-text key=value config file; keys are the long option names of
    /// the subcommand. Command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all stochastic behavior.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the hierarchical-B coding schedule as CSV.
    Plan(PlanArgs),
    /// Train the intra codec and the B/B* codecs.
    Train(TrainArgs),
    /// Encode a video into a .bcf bitstream.
    Encode(EncodeArgs),
    /// Decode a .bcf bitstream.
    Decode(DecodeArgs),
    /// Decode a bitstream and report per-frame PSNR/bpp against the source.
    Eval(EvalArgs),
    /// Bjontegaard delta rate between two RD curve CSV files.
    Bdrate(BdrateArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Number of frames to plan.
    #[arg(long)]
    frames: u32,
    #[arg(long, default_value_t = 16)]
    gop: u32,
    #[arg(long, default_value_t = 32)]
    intra_period: u32,
    /// Treat --frames as source length and trim to whole intra-periods.
    #[arg(long, default_value_t = false)]
    trim_to_intra_periods: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Conditional,
    Residual,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PredictorArg {
    Learned,
    Fallback,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HypothesisArg {
    Both,
    First,
    Second,
}

impl HypothesisArg {
    fn to_mode(self) -> HypothesisMode {
        match self {
            HypothesisArg::Both => HypothesisMode::Both,
            HypothesisArg::First => HypothesisMode::First,
            HypothesisArg::Second => HypothesisMode::Second,
        }
    }
}

#[derive(Args, Clone)]
struct ArchArgs {
    /// Use the small test-scale architecture preset.
    #[arg(long, default_value_t = false)]
    toy: bool,
    #[arg(long)]
    coupling_width: Option<usize>,
    #[arg(long)]
    hyper_width: Option<usize>,
    #[arg(long)]
    latent_channels: Option<usize>,
    #[arg(long)]
    hyper_channels: Option<usize>,
    #[arg(long)]
    signal_down: Option<usize>,
    #[arg(long)]
    hyper_down: Option<usize>,
    /// Skip the first autoencoding transform (single-coupling ablation).
    #[arg(long, default_value_t = false)]
    one_step: bool,
    /// Disable frame-type adaptation tables.
    #[arg(long, default_value_t = false)]
    no_fa: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Conditional)]
    motion_mode: ModeArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Conditional)]
    inter_mode: ModeArg,
    #[arg(long, value_enum)]
    predictor: Option<PredictorArg>,
}

impl ArchArgs {
    fn build(&self) -> ArchConfig {
        let mut a = if self.toy { ArchConfig::toy() } else { ArchConfig::default() };
        if let Some(v) = self.coupling_width {
            a.coupling_width = v;
        }
        if let Some(v) = self.hyper_width {
            a.hyper_width = v;
        }
        if let Some(v) = self.latent_channels {
            a.latent_channels = v;
        }
        if let Some(v) = self.hyper_channels {
            a.hyper_channels = v;
        }
        if let Some(v) = self.signal_down {
            a.signal_down = v;
        }
        if let Some(v) = self.hyper_down {
            a.hyper_down = v;
        }
        a.one_step = self.one_step;
        a.fa = !self.no_fa;
        a.motion_mode = match self.motion_mode {
            ModeArg::Conditional => CodingMode::Conditional,
            ModeArg::Residual => CodingMode::Residual,
        };
        a.inter_mode = match self.inter_mode {
            ModeArg::Conditional => CodingMode::Conditional,
            ModeArg::Residual => CodingMode::Residual,
        };
        if let Some(p) = self.predictor {
            a.predictor = match p {
                PredictorArg::Learned => PredictorKind::Learned,
                PredictorArg::Fallback => PredictorKind::Fallback,
            };
        }
        a
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Rate point index into lambda1 = {128, 512, 1024, 2048}.
    #[arg(long, default_value_t = 3)]
    lambda_index: u8,
    #[arg(long, default_value_t = 2000)]
    steps: u32,
    #[arg(long, default_value_t = 400)]
    intra_steps: u32,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Square clip size for synthetic training data.
    #[arg(long, default_value_t = 256)]
    clip_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Frame folder (ppm sequence) or y4m file to train on; synthetic
    /// moving textures when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Y4m420)]
    data_format: FormatArg,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Resume from an existing checkpoint instead of fresh initialization.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Progress CSV (step, loss, D, R, F).
    #[arg(long)]
    progress: Option<PathBuf>,
    /// Write one synthetic training clip to this path as y4m, then exit.
    #[arg(long)]
    dump_sample_y4m: Option<PathBuf>,
    #[arg(long, default_value_t = 33)]
    dump_sample_frames: usize,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    #[value(name = "y4m-420")]
    Y4m420,
    #[value(name = "raw-rgb")]
    RawRgb,
    #[value(name = "ppm-sequence")]
    PpmSequence,
}

impl FormatArg {
    fn to_format(self) -> VideoFormat {
        match self {
            FormatArg::Y4m420 => VideoFormat::Y4m420,
            FormatArg::RawRgb => VideoFormat::RawRgb,
            FormatArg::PpmSequence => VideoFormat::PpmSequence,
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Y4m420)]
    format: FormatArg,
    /// Frame width (raw-rgb input only).
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 16)]
    gop: u32,
    #[arg(long, default_value_t = 32)]
    intra_period: u32,
    #[arg(long, default_value_t = 3)]
    lambda_index: u8,
    /// Code the whole source instead of trimming to whole intra-periods.
    #[arg(long, default_value_t = false)]
    no_trim: bool,
    /// Embed per-frame reconstruction checksums (debug).
    #[arg(long, default_value_t = false)]
    checksum: bool,
    /// Independent frames coded concurrently.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Which B* flow hypotheses the synthesis uses (ablation switch; the
    /// decoder must be given the same value).
    #[arg(long, value_enum, default_value_t = HypothesisArg::Both)]
    bstar_hypothesis: HypothesisArg,
    /// Also write the encoder-side reconstructions as raw RGB24.
    #[arg(long)]
    recon: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// raw-rgb writes one file; ppm-sequence writes a directory.
    #[arg(long, value_enum, default_value_t = FormatArg::RawRgb)]
    format: FormatArg,
    #[arg(long, value_enum, default_value_t = HypothesisArg::Both)]
    bstar_hypothesis: HypothesisArg,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Original source video.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Y4m420)]
    format: FormatArg,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    bitstream: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-frame profile CSV output.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HypothesisArg::Both)]
    bstar_hypothesis: HypothesisArg,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct BdrateArgs {
    /// Anchor curve CSV with bpp,psnr rows.
    #[arg(long)]
    anchor: PathBuf,
    /// Test curve CSV with bpp,psnr rows.
    #[arg(long)]
    test: PathBuf,
}

fn main() -> ExitCode {
    let args = splice_config_args();
    let cli = Cli::parse_from(args);
    let result = match &cli.command {
        Command::Plan(a) => run_plan(a),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Encode(a) => run_encode(a, cli.seed),
        Command::Decode(a) => run_decode(a, cli.seed),
        Command::Eval(a) => run_eval(a, cli.seed),
        Command::Bdrate(a) => run_bdrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Expand `--config file` into pseudo-arguments placed before the real
/// flags, so explicit flags win.
fn splice_config_args() -> Vec<String> {
    let argv: Vec<String> = std::env::args().collect();
    let mut cfg_path = None;
    for i in 0..argv.len() {
        if argv[i] == "--config" && i + 1 < argv.len() {
            cfg_path = Some(argv[i + 1].clone());
        }
    }
    let Some(path) = cfg_path else { return argv };
    let Ok(text) = fs::read_to_string(&path) else {
        eprintln!("error: cannot read config file {path}");
        std::process::exit(2);
    };
    let mut extra = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            eprintln!("error: bad config line (expected key=value): {line}");
            std::process::exit(2);
        };
        let key = format!("--{}", k.trim());
        let val = v.trim().to_string();
        if val == "true" {
            extra.push(key);
        } else if val != "false" {
            extra.push(key);
            extra.push(val);
        }
    }
    // program name, subcommand, config-derived args, explicit args
    let mut out = Vec::with_capacity(argv.len() + extra.len());
    out.push(argv[0].clone());
    if argv.len() > 1 {
        out.push(argv[1].clone());
    }
    out.extend(extra);
    out.extend(argv.iter().skip(2).cloned());
    out
}

fn run_plan(a: &PlanArgs) -> Result<(), Error> {
    let frames = if a.trim_to_intra_periods {
        gop::trim_to_intra_periods(a.frames, a.intra_period)
    } else {
        a.frames
    };
    let plan = gop::plan(frames, a.gop, a.intra_period)?;
    print!("{}", gop::plan_csv(&plan));
    Ok(())
}

fn load_models(arch: &ArchArgs, checkpoint: &Path, seed: u64) -> Result<Models<f32>, Error> {
    let mut models = Models::new(arch.build(), seed)?;
    models.load(checkpoint)?;
    Ok(models)
}

fn run_train(a: &TrainArgs, seed: u64) -> Result<(), Error> {
    if let Some(path) = &a.dump_sample_y4m {
        return dump_sample(path, a.clip_size, a.dump_sample_frames, seed);
    }
    let mut models = Models::<f32>::new(a.arch.build(), seed)?;
    if let Some(init) = &a.init_checkpoint {
        models.load(init)?;
    }
    let weights = LossWeights::from_lambda_index(a.lambda_index)?;
    let source = match &a.data {
        Some(path) => {
            let dims = None;
            let video = video::read_video(path, a.data_format.to_format(), dims)?;
            ClipSource::Folder { video, crop: a.clip_size }
        }
        None => ClipSource::Synthetic { size: a.clip_size },
    };
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(1));
    let mut progress = String::from("phase,step,loss,distortion,rate_bpp,regularizer\n");
    if a.init_checkpoint.is_none() && a.intra_steps > 0 {
        eprintln!("pretraining intra codec: {} steps", a.intra_steps);
        training::pretrain_intra(
            &mut models,
            &source,
            a.intra_steps,
            a.batch_size,
            a.lr,
            &weights,
            &mut rng,
            |step, m| {
                progress.push_str(&format!(
                    "intra,{step},{:.6},{:.6},{:.6},{:.6}\n",
                    m.loss, m.distortion, m.rate_bpp, m.regularizer
                ));
                if step % 100 == 0 {
                    eprintln!("  intra step {step}: loss {:.4}", m.loss);
                }
            },
        )?;
    }
    models.freeze_intra();
    eprintln!("training B/B* codecs: {} steps", a.steps);
    let opts = TrainOptions { steps: a.steps, batch_size: a.batch_size, lr: a.lr };
    training::train_b_codecs(&mut models, &source, &opts, &weights, &mut rng, |step, m| {
        progress.push_str(&format!(
            "b,{step},{:.6},{:.6},{:.6},{:.6}\n",
            m.loss, m.distortion, m.rate_bpp, m.regularizer
        ));
        if step % 100 == 0 {
            eprintln!(
                "  step {step}: loss {:.4} D {:.5} R {:.4} F {:.5}",
                m.loss, m.distortion, m.rate_bpp, m.regularizer
            );
        }
    })?;
    models.save(&a.checkpoint)?;
    eprintln!("checkpoint written to {}", a.checkpoint.display());
    if let Some(p) = &a.progress {
        fs::write(p, progress)?;
    }
    Ok(())
}

fn dump_sample(path: &Path, size: usize, frames: usize, seed: u64) -> Result<(), Error> {
    use bcanf::training::data::{crop_at_rotated, texture_canvas};
    let canvas = texture_canvas(2 * size + 16, 2 * size + 16, seed);
    let mut out: Vec<Vec<u8>> = Vec::new();
    for t in 0..frames {
        let f = crop_at_rotated(
            &canvas,
            4.0 + 0.9 * t as f64,
            4.0 + 1.4 * t as f64,
            0.004 * t as f64,
            size,
            size,
        );
        out.push(video::tensor_to_rgb8(&f));
    }
    let v = VideoSource::new(size as u32, size as u32, out)?;
    write_y4m_420(&v, path)
}

/// Write RGB frames as y4m 4:2:0 (BT.601 full-range, box-averaged chroma).
fn write_y4m_420(v: &VideoSource, path: &Path) -> Result<(), Error> {
    use std::io::Write;
    let (w, h) = (v.width as usize, v.height as usize);
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Video("y4m 4:2:0 needs even dimensions".into()));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "YUV4MPEG2 W{w} H{h} F30:1 Ip A1:1 C420\n")?;
    for frame in &v.frames {
        f.write_all(b"FRAME\n")?;
        let mut yplane = vec![0u8; w * h];
        let mut uplane = vec![0f64; (w / 2) * (h / 2)];
        let mut vplane = vec![0f64; (w / 2) * (h / 2)];
        for y in 0..h {
            for x in 0..w {
                let r = frame[(y * w + x) * 3] as f64;
                let g = frame[(y * w + x) * 3 + 1] as f64;
                let b = frame[(y * w + x) * 3 + 2] as f64;
                let yy = 0.299 * r + 0.587 * g + 0.114 * b;
                let u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
                let vv = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
                yplane[y * w + x] = yy.round().clamp(0.0, 255.0) as u8;
                uplane[(y / 2) * (w / 2) + x / 2] += u * 0.25;
                vplane[(y / 2) * (w / 2) + x / 2] += vv * 0.25;
            }
        }
        f.write_all(&yplane)?;
        let quant =
            |p: &[f64]| p.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect::<Vec<u8>>();
        f.write_all(&quant(&uplane))?;
        f.write_all(&quant(&vplane))?;
    }
    Ok(())
}

fn read_input(
    path: &Path,
    format: FormatArg,
    width: Option<u32>,
    height: Option<u32>,
) -> Result<VideoSource, Error> {
    let dims = match (width, height) {
        (Some(w), Some(h)) => Some((w, h)),
        _ => None,
    };
    video::read_video(path, format.to_format(), dims)
}

fn run_encode(a: &EncodeArgs, seed: u64) -> Result<(), Error> {
    let source = read_input(&a.input, a.format, a.width, a.height)?;
    if source.frame_count() == 0 {
        return Err(Error::Video("empty input video".into()));
    }
    let n = if a.no_trim {
        source.frame_count()
    } else {
        gop::trim_to_intra_periods(source.frame_count(), a.intra_period)
    };
    let models = load_models(&a.arch, &a.checkpoint, seed)?;
    let mut cfg = CodecConfig::new(source.width, source.height, a.gop, a.intra_period)?;
    cfg.lambda_index = a.lambda_index;
    cfg.debug_checksum = a.checksum;
    cfg.parallelism = a.parallelism.max(1);
    cfg.bstar_hypothesis = a.bstar_hypothesis.to_mode();
    let frames: Vec<Tensor32> =
        (0..n as usize).map(|i| source.to_tensor::<f32>(i)).collect();
    eprintln!("encoding {n} of {} frames", source.frame_count());
    let result = codec::encode_sequence(&models, &cfg, &frames)?;
    let bytes = result.bitstream.serialize();
    fs::write(&a.output, &bytes)?;
    let payload_bits = result.bitstream.payload_bits();
    let pixels = source.width as u64 * source.height as u64 * n as u64;
    eprintln!(
        "wrote {} bytes ({:.4} bpp over {n} frames) to {}",
        bytes.len(),
        payload_bits as f64 / pixels as f64,
        a.output.display()
    );
    if let Some(rp) = &a.recon {
        let frames: Vec<Vec<u8>> = result
            .reconstructions
            .iter()
            .map(|t| {
                video::tensor_to_rgb8(&codec::crop_frame(
                    t,
                    source.height as usize,
                    source.width as usize,
                ))
            })
            .collect();
        video::write_raw(&VideoSource::new(source.width, source.height, frames)?, rp)?;
    }
    Ok(())
}

fn run_decode(a: &DecodeArgs, seed: u64) -> Result<(), Error> {
    let bytes = fs::read(&a.input)?;
    let stream = Bitstream::deserialize(&bytes)?;
    let models = load_models(&a.arch, &a.checkpoint, seed)?;
    let recon = codec::decode_sequence_with(&models, &stream, a.bstar_hypothesis.to_mode())?;
    let (w, h) = (stream.header.width as u32, stream.header.height as u32);
    let frames: Vec<Vec<u8>> = recon
        .iter()
        .map(|t| video::tensor_to_rgb8(&codec::crop_frame(t, h as usize, w as usize)))
        .collect();
    let v = VideoSource::new(w, h, frames)?;
    match a.format {
        FormatArg::RawRgb => video::write_raw(&v, &a.output)?,
        FormatArg::PpmSequence => video::write_ppm_sequence(&v, &a.output, "frame")?,
        FormatArg::Y4m420 => write_y4m_420(&v, &a.output)?,
    }
    eprintln!("decoded {} frames to {}", v.frame_count(), a.output.display());
    Ok(())
}

fn run_eval(a: &EvalArgs, seed: u64) -> Result<(), Error> {
    let source = read_input(&a.input, a.format, a.width, a.height)?;
    let bytes = fs::read(&a.bitstream)?;
    let stream = Bitstream::deserialize(&bytes)?;
    let models = load_models(&a.arch, &a.checkpoint, seed)?;
    let h = &stream.header;
    if h.width as u32 != source.width || h.height as u32 != source.height {
        return Err(Error::Contract(format!(
            "bitstream is {}x{}, source is {}x{}",
            h.width, h.height, source.width, source.height
        )));
    }
    if (h.frame_count as usize) > source.frames.len() {
        return Err(Error::Contract(format!(
            "bitstream has {} frames, source only {}",
            h.frame_count,
            source.frames.len()
        )));
    }
    let plan = gop::plan(h.frame_count, h.gop_size as u32, h.intra_period as u32)?;
    let recon = codec::decode_sequence_with(&models, &stream, a.bstar_hypothesis.to_mode())?;
    let (w, hh) = (source.width, source.height);
    let mut rows = Vec::new();
    for (d, t) in recon.iter().enumerate() {
        let rgb = video::tensor_to_rgb8(&codec::crop_frame(t, hh as usize, w as usize));
        let p = metrics::psnr(&rgb, &source.frames[d])?;
        let frame = stream
            .frames
            .iter()
            .find(|f| f.display_index == d as u32)
            .ok_or_else(|| Error::Bitstream(format!("frame {d} missing from stream")))?;
        let bits = frame.payload_bits();
        rows.push(ProfileRow {
            display_index: d as u32,
            kind: plan.by_display(d as u32).unwrap().kind,
            payload_bits: bits,
            bpp: metrics::bpp(bits / 8, w, hh),
            psnr: p,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr: f64 = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let total_bits: u64 = rows.iter().map(|r| r.payload_bits).sum();
    let seq_bpp = total_bits as f64 / (w as f64 * hh as f64 * n);
    println!("frames: {}", rows.len());
    println!("mean PSNR: {mean_psnr:.4} dB");
    println!("bpp: {seq_bpp:.6}");
    let report = metrics::profile_report(&rows);
    if let Some(p) = &a.profile {
        fs::write(p, &report)?;
        eprintln!("profile written to {}", p.display());
    } else {
        print!("{report}");
    }
    Ok(())
}

fn run_bdrate(a: &BdrateArgs) -> Result<(), Error> {
    let anchor = parse_curve(&a.anchor)?;
    let test = parse_curve(&a.test)?;
    let r = metrics::bd_rate(&anchor, &test)?;
    println!("{r:.4}");
    Ok(())
}

fn parse_curve(path: &Path) -> Result<RdCurve, Error> {
    metrics::parse_curve_csv(&fs::read_to_string(path)?)
}
