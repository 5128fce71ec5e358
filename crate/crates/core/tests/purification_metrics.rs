use avshield::metrics::{psnr, snr, ssim, sync_proxy};
use avshield::purification::{
    jpeg_purify, resize_purify, spectral_gate, spectral_subtract, GateParams, PurifierSpec, SubtractParams,
};
use avshield::rng::{gaussian, stream};
use avshield::victim::dataset::Rect;
use avshield::victim::{AudioClip, FrameSequence, PortraitImage, SAMPLES_PER_FRAME, SAMPLE_RATE};
use avshield::Tensor;

fn gradient_image(side: usize) -> PortraitImage {
    let mut d = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                d.push(((x + y + 4 * c) as f64 / (2 * side + 8) as f64).clamp(0.0, 1.0));
            }
        }
    }
    PortraitImage::new(Tensor::new(vec![3, side, side], d).unwrap()).unwrap()
}

fn checkerboard(side: usize) -> PortraitImage {
    let d: Vec<f64> = (0..3 * side * side)
        .map(|i| {
            if ((i % side) + (i / side) % side).is_multiple_of(2) {
                0.2
            } else {
                0.8
            }
        })
        .collect();
    PortraitImage::new(Tensor::new(vec![3, side, side], d).unwrap()).unwrap()
}

fn tone(freq: f64, amp: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
        .collect()
}

fn noise(seed: u64, amp: f64, len: usize) -> Vec<f64> {
    gaussian(&mut stream(seed), &[len])
        .data()
        .iter()
        .map(|v| amp * v)
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn jpeg_keeps_shape_and_range() {
    let img = gradient_image(32);
    let out = jpeg_purify(&img, 75).unwrap();
    assert_eq!(out.tensor().shape(), img.tensor().shape());
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // A smooth ramp survives quality 75 nearly intact.
    assert!(psnr(&img, &out).unwrap() > 30.0);
    assert!(jpeg_purify(&img, 0).is_err());
}

#[test]
fn jpeg_is_deterministic_and_quality_ordered() {
    let img = checkerboard(32);
    assert_eq!(jpeg_purify(&img, 40).unwrap(), jpeg_purify(&img, 40).unwrap());
    let lo = psnr(&img, &jpeg_purify(&img, 10).unwrap()).unwrap();
    let hi = psnr(&img, &jpeg_purify(&img, 95).unwrap()).unwrap();
    assert!(hi > lo, "{hi} <= {lo}");
}

#[test]
fn resize_removes_high_frequencies() {
    let board = checkerboard(32);
    let out = resize_purify(&board, 0.5).unwrap();
    assert_eq!(out.tensor().shape(), board.tensor().shape());
    let spread = |p: &PortraitImage| {
        let d = p.data();
        d.iter().cloned().fold(f64::MIN, f64::max) - d.iter().cloned().fold(f64::MAX, f64::min)
    };
    assert!(spread(&out) < 0.5 * spread(&board));
    let flat = PortraitImage::constant(32, 32, 0.4).unwrap();
    assert!(resize_purify(&flat, 0.5).unwrap().max_abs_diff(&flat) < 1e-6);
    assert!(resize_purify(&board, 1.0).is_err());
    assert!(resize_purify(&PortraitImage::constant(2, 2, 0.5).unwrap(), 0.1).is_err());
}

#[test]
fn gate_attenuates_quiet_noise_and_keeps_tone() {
    let len = SAMPLE_RATE as usize;
    // Tone in the second half, faint noise throughout.
    let n = noise(1, 0.005, len);
    let t = tone(440.0, 0.5, len);
    let mixed: Vec<f64> = (0..len).map(|i| n[i] + if i >= len / 2 { t[i] } else { 0.0 }).collect();
    let out = spectral_gate(&AudioClip::new(mixed.clone()).unwrap(), &GateParams::default()).unwrap();
    assert_eq!(out.len(), len);
    let s = out.samples();
    let quiet = 2000..len / 2 - 2000;
    let loud = len / 2 + 2000..len - 2000;
    let cut = energy(&s[quiet.clone()]) / energy(&mixed[quiet]);
    // Only the weakest fifth of each noise bin is gated, a few percent of the energy.
    assert!(cut < 0.98, "{cut}");
    let kept = energy(&s[loud.clone()]) / energy(&mixed[loud]);
    assert!((0.9..1.1).contains(&kept), "{kept}");
    let open = GateParams {
        attenuation: 1.0,
        ..GateParams::default()
    };
    let same = spectral_gate(&AudioClip::new(mixed.clone()).unwrap(), &open).unwrap();
    let err = same
        .samples()
        .iter()
        .zip(&mixed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

#[test]
fn subtract_reduces_stationary_noise() {
    let len = SAMPLE_RATE as usize;
    let n = noise(2, 0.02, len);
    let t = tone(300.0, 0.4, len);
    // Tone gated on and off so the quietest frames hold only noise.
    let mixed: Vec<f64> = (0..len)
        .map(|i| n[i] + if (i / 4000) % 2 == 1 { t[i] } else { 0.0 })
        .collect();
    let clean: Vec<f64> = (0..len).map(|i| if (i / 4000) % 2 == 1 { t[i] } else { 0.0 }).collect();
    let clean = AudioClip::new(clean).unwrap();
    let before = snr(&clean, &AudioClip::new(mixed.clone()).unwrap()).unwrap();
    let out = spectral_subtract(&AudioClip::new(mixed).unwrap(), &SubtractParams::default()).unwrap();
    let after = snr(&clean, &out).unwrap();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn audio_purifiers_keep_range() {
    let x = AudioClip::new(noise(3, 0.6, 8000).iter().map(|v| v.clamp(-1.0, 1.0)).collect()).unwrap();
    for spec in PurifierSpec::defaults().into_iter().filter(|s| !s.is_image()) {
        let out = spec.apply_audio(&x).unwrap();
        assert_eq!(out.len(), x.len());
        assert!(out.samples().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn purifier_config_parsing() {
    let s: PurifierSpec = serde_json::from_str(r#"{"kind": "jpeg", "quality": 50}"#).unwrap();
    assert_eq!(s.name(), "jpeg");
    let g: PurifierSpec = serde_json::from_str(r#"{"kind": "spectral_gate", "window": 256, "hop": 64}"#).unwrap();
    assert!(g.validate().is_ok());
    assert!(serde_json::from_str::<PurifierSpec>(r#"{"kind": "jpeg", "qualty": 50}"#).is_err());
    assert!(serde_json::from_str::<PurifierSpec>(r#"{"kind": "blur"}"#).is_err());
    let bad: PurifierSpec = serde_json::from_str(r#"{"kind": "spectral_gate", "window": 256, "hop": 200}"#).unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn metric_examples() {
    let a = PortraitImage::constant(16, 16, 0.5).unwrap();
    let b = PortraitImage::constant(16, 16, 0.5 + 16.0 / 255.0).unwrap();
    assert!((psnr(&a, &b).unwrap() - 24.0478).abs() < 1e-3);
    let img = gradient_image(24);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    assert!(ssim(&img, &checkerboard(24)).unwrap() < 0.5);
    let clean = AudioClip::new(tone(200.0, 0.5, 1600)).unwrap();
    let noisy = AudioClip::new(clean.samples().iter().map(|v| v * 0.9).collect()).unwrap();
    assert!((snr(&clean, &noisy).unwrap() - 20.0).abs() < 1e-8);
}

/// Frames whose mouth brightness is an affine function of the audio RMS.
fn matched_frames(audio: &AudioClip, slope: f64) -> FrameSequence {
    let rms = audio.frame_rms();
    let frames = rms
        .iter()
        .map(|r| PortraitImage::constant(20, 20, (0.5 + slope * r).clamp(0.0, 1.0)).unwrap())
        .collect();
    FrameSequence { frames }
}

#[test]
fn sync_proxy_signs() {
    let frames = 10;
    let mut samples = Vec::new();
    for f in 0..frames {
        samples.extend(tone(300.0, 0.05 + 0.04 * ((f * 7) % 5) as f64, SAMPLES_PER_FRAME));
    }
    let audio = AudioClip::new(samples).unwrap();
    let region = Rect {
        x0: 5,
        y0: 10,
        x1: 15,
        y1: 16,
    };
    let pos = sync_proxy(&matched_frames(&audio, 2.0), &audio, &region).unwrap();
    let neg = sync_proxy(&matched_frames(&audio, -2.0), &audio, &region).unwrap();
    assert!((pos - 1.0).abs() < 1e-9, "{pos}");
    assert!((neg + 1.0).abs() < 1e-9, "{neg}");
    let short = FrameSequence {
        frames: matched_frames(&audio, 1.0).frames[..frames - 1].to_vec(),
    };
    assert!(sync_proxy(&short, &audio, &region).is_err());
}
