mod common;

use avshield::audio_attack::caf_loss_grad_at;
use avshield::rng::{gaussian, stream};
use avshield::victim::{LatentGrid, LayerBranchUnit};

use common::gradcheck::{caf_error, mis_error, nullifying_errors, TOL};
use common::{small_clip, small_model};

#[test]
fn nullifying_gradient() {
    for (t, err) in nullifying_errors() {
        println!("nullifying t={t}: relative error {err:.2e}");
        assert!(err <= TOL, "t={t}: {err}");
    }
}

#[test]
fn mis_gradient() {
    let err = mis_error();
    println!("mis: relative error {err:.2e}");
    assert!(err <= TOL, "{err}");
}

#[test]
fn caf_gradient() {
    let err = caf_error();
    println!("caf: relative error {err:.2e}");
    assert!(err <= TOL, "{err}");
}

#[test]
fn caf_gradient_frame_subset_is_restricted() {
    let model = small_model(6, 34);
    let clip = small_clip(16, 0.2, 4);
    let units: Vec<LayerBranchUnit> = vec!["mid_0_lip".parse().unwrap()];
    let eps = LatentGrid::new(gaussian(&mut stream(7), &[3, 8, 8])).unwrap();
    let (_, grad) = caf_loss_grad_at(&model, &clip.reference, &clip.audio, Some(vec![0]), 300, &eps, &units).unwrap();
    // Frame 0 sees feature rows 0..=2 (radius 2); samples of rows 3 and 4 get no gradient.
    assert!(grad[..3 * 640].iter().any(|g| *g != 0.0));
    assert!(grad[3 * 640..].iter().all(|g| *g == 0.0));
}
