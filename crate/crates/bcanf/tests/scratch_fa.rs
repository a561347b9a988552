//! Temporary probe for the frame-type allocation trend (removed before final).

use bcanf::codec::{self, ArchConfig, CodecConfig, Models};
use bcanf::gop::FrameKind;
use bcanf::metrics::psnr;
use bcanf::tensor::Tensor;
use bcanf::training::data::{crop_at_rotated, texture_canvas};
use bcanf::video::tensor_to_rgb8;

fn seq(n: usize, size: usize, seed: u64, vel: f64, rot: f64) -> Vec<Tensor<f32>> {
    let canvas = texture_canvas(4 * size + 32, 4 * size + 32, seed);
    (0..n)
        .map(|t| {
            crop_at_rotated(
                &canvas,
                10.0 + 0.6 * vel * t as f64,
                12.0 + vel * t as f64,
                rot * t as f64,
                size,
                size,
            )
        })
        .collect()
}

fn stats_g(
    frames: &[Tensor<f32>],
    models: &Models<f32>,
    kind: FrameKind,
    gop: u32,
    intra: u32,
) -> (f64, f64) {
    let size = frames[0].shape()[3];
    let cfg = CodecConfig::new(size as u32, size as u32, gop, intra).unwrap();
    let result = codec::encode_sequence(models, &cfg, frames).unwrap();
    let mut p = 0.0;
    let mut bits = 0.0;
    let mut n = 0.0;
    for ef in &result.bitstream.frames {
        if ef.kind != kind {
            continue;
        }
        let d = ef.display_index as usize;
        let a = tensor_to_rgb8(&codec::crop_frame(&result.reconstructions[d], size, size));
        let b = tensor_to_rgb8(&frames[d]);
        p += psnr(&a, &b).unwrap();
        bits += ef.payload_bits() as f64;
        n += 1.0;
    }
    (p / n, bits / n)
}

#[test]
#[ignore]
fn probe_fa_gap() {
    let mut models = Models::<f32>::new(ArchConfig::toy(), 0).unwrap();
    models.load(std::path::Path::new("/tmp/v2_2048.bcnp")).unwrap();
    for (vel, rot) in [(1.3, 0.003), (2.5, 0.008), (3.5, 0.015)] {
        let frames = seq(17, 32, 80801, vel, rot);
        let (pr, br) = stats_g(&frames, &models, FrameKind::RefB, 4, 16);
        let (pn, bn) = stats_g(&frames, &models, FrameKind::NonRefB, 4, 16);
        println!(
            "vel {vel} rot {rot}: REF {pr:.3} dB {br:.0} bits | NONREF {pn:.3} dB {bn:.0} bits | gap {:.3}",
            pr - pn
        );
    }
}

#[test]
#[ignore]
fn probe_fa_gap_5frame() {
    let mut models = Models::<f32>::new(ArchConfig::toy(), 0).unwrap();
    models.load(std::path::Path::new("/tmp/v2_2048.bcnp")).unwrap();
    for (vel, rot) in [(0.5, 0.001), (1.3, 0.003), (2.5, 0.008)] {
        let mut pr = 0.0;
        let mut pn = 0.0;
        let mut br = 0.0;
        let mut bn = 0.0;
        let m = 8;
        for k in 0..m {
            let frames = seq(5, 32, 80_801 + k, vel, rot);
            let (a, b) = stats_g(&frames, &models, FrameKind::RefB, 4, 4);
            let (c, d) = stats_g(&frames, &models, FrameKind::NonRefB, 4, 4);
            pr += a / m as f64;
            br += b / m as f64;
            pn += c / m as f64;
            bn += d / m as f64;
        }
        println!(
            "5f vel {vel}: REF {pr:.3} dB {br:.0} bits | NONREF {pn:.3} dB {bn:.0} bits | gap {:.3}",
            pr - pn
        );
    }
}
