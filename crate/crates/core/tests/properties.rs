mod common;

use common::invariants::*;

macro_rules! property {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                if let Err(e) = invariants::$name() {
                    panic!("{e}");
                }
            }
        )*
    };
}

use common::invariants;

property!(
    diff_frozen_mask,
    diff_linearity,
    diff_conv_brute_force,
    diff_upsample_transpose,
    diff_second_order,
    model_predict_pure,
    model_training_finite,
    model_dataset_avoids_patch,
    interpret_graph_equals_numeric,
    interpret_bias_invariance,
    interpret_occlusion_equivariance,
    attack_compose_purity,
    attack_clip_bounds,
    attack_run_invariants,
    metrics_ranges,
    metrics_intersection,
    metrics_localization_scale,
    metrics_aggregates,
);

#[test]
fn every_invariant_is_listed() {
    assert_eq!(ALL.len(), 18);
}
