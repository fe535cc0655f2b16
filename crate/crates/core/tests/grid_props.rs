#[allow(dead_code)]
#[path = "common/grid_suite.rs"]
mod grid_suite;

use grid_suite::CASES_PER_PROPERTY;

macro_rules! suite_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                grid_suite::$name(CASES_PER_PROPERTY).unwrap();
            }
        )*
    };
}

suite_tests!(
    warp_by_zero_is_identity,
    compose_with_zero_is_identity,
    compose_constant_associative,
    compose_smooth_associative,
    folding_ratio_in_unit_interval,
    scaled_constant_never_folds,
    constant_inverse_fb_vanishes,
    integer_shift_warps_agree,
);
