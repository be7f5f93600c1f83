mod common;

fn pass(check: common::Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

#[test]
fn local_adaptation_algebra() {
    pass(common::local_algebra());
}

#[test]
fn adversarial_separation_and_masking() {
    pass(common::separation_and_masking());
}

#[test]
fn ap_matches_threshold_sweep_and_iou_matches_clipping_oracle() {
    pass(common::ap_oracle_equivalence());
}

#[test]
fn points_per_car_fall_with_range() {
    pass(common::simulator_density());
}

#[test]
fn file_formats_round_trip_and_reject_garbage() {
    pass(common::format_fidelity());
}

#[test]
fn zero_weights_reproduce_detection_only_training() {
    pass(common::baseline_equivalence());
}
