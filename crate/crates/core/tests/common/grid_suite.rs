//! Grid algebra properties, shared by the property test target and the
//! acceptance timing check.

use std::f64::consts::TAU;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use usdeform::grid::{compose, fb_residual, folding_ratio, warp, warp_nearest, FlowField, Image2D};

pub const CASES_PER_PROPERTY: u32 = 25;

pub type Property = fn(u32) -> Result<(), String>;

pub const SUITE: &[(&str, Property)] = &[
    ("warp_by_zero_is_identity", warp_by_zero_is_identity),
    ("compose_with_zero_is_identity", compose_with_zero_is_identity),
    ("compose_constant_associative", compose_constant_associative),
    ("compose_smooth_associative", compose_smooth_associative),
    ("folding_ratio_in_unit_interval", folding_ratio_in_unit_interval),
    ("scaled_constant_never_folds", scaled_constant_never_folds),
    ("constant_inverse_fb_vanishes", constant_inverse_fb_vanishes),
    ("integer_shift_warps_agree", integer_shift_warps_agree),
];

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (4usize..24, 4usize..24)
}

fn image() -> impl Strategy<Value = Image2D> {
    dims().prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f64..=1.0, w * h).prop_map(move |d| Image2D::new(w, h, d).unwrap())
    })
}

fn noise_field(w: usize, h: usize, amp: f64) -> impl Strategy<Value = FlowField> {
    prop::collection::vec(prop::array::uniform2(-amp..=amp), w * h)
        .prop_map(move |d| FlowField::new(w, h, d).unwrap())
}

fn vector(amp: f64) -> impl Strategy<Value = [f64; 2]> {
    prop::array::uniform2(-amp..=amp)
}

/// Sum of one sinusoid per component, amplitude at most `amp`.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: [f64; 2],
    freq: [[f64; 2]; 2],
    phase: [f64; 2],
}

fn wave(amp: f64) -> impl Strategy<Value = Wave> {
    let k = 1.0 / 48.0;
    (
        prop::array::uniform2(-amp..=amp),
        prop::array::uniform2(prop::array::uniform2(-k..=k)),
        prop::array::uniform2(0.0..TAU),
    )
        .prop_map(|(amp, freq, phase)| Wave { amp, freq, phase })
}

fn wave_field(w: usize, h: usize, p: Wave) -> FlowField {
    FlowField::from_fn(w, h, |x, y| {
        let c = |k: usize| {
            let arg = TAU * (p.freq[k][0] * x as f64 + p.freq[k][1] * y as f64) + p.phase[k];
            p.amp[k] * arg.sin()
        };
        [c(0), c(1)]
    })
    .unwrap()
}

fn max_diff(a: &FlowField, b: &FlowField, margin: usize) -> f64 {
    let (w, h) = a.dims();
    let mut m: f64 = 0.0;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (p, q) = (a.get(x, y), b.get(x, y));
            m = m.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
        }
    }
    m
}

pub fn warp_by_zero_is_identity(cases: u32) -> Result<(), String> {
    run(cases, image(), |img| {
        let (w, h) = img.dims();
        prop_assert_eq!(warp(&img, &FlowField::zeros(w, h)).unwrap(), img);
        Ok(())
    })
}

pub fn compose_with_zero_is_identity(cases: u32) -> Result<(), String> {
    let s = dims().prop_flat_map(|(w, h)| noise_field(w, h, 5.0));
    run(cases, s, |g| {
        let (w, h) = g.dims();
        let zero = FlowField::zeros(w, h);
        prop_assert_eq!(&compose(&zero, &g).unwrap(), &g);
        prop_assert_eq!(&compose(&g, &zero).unwrap(), &g);
        Ok(())
    })
}

pub fn compose_constant_associative(cases: u32) -> Result<(), String> {
    let s = (dims(), vector(4.0), vector(4.0), vector(4.0));
    run(cases, s, |((w, h), a, b, c)| {
        let (f, g, k) = (
            FlowField::constant(w, h, a),
            FlowField::constant(w, h, b),
            FlowField::constant(w, h, c),
        );
        let left = compose(&compose(&f, &g).unwrap(), &k).unwrap();
        let right = compose(&f, &compose(&g, &k).unwrap()).unwrap();
        prop_assert!(max_diff(&left, &right, 0) < 1e-4);
        Ok(())
    })
}

pub fn compose_smooth_associative(cases: u32) -> Result<(), String> {
    let s = (wave(3.0), wave(3.0), wave(3.0));
    run(cases, s, |(p, q, r)| {
        let (w, h) = (48, 40);
        let (f, g, k) = (wave_field(w, h, p), wave_field(w, h, q), wave_field(w, h, r));
        let left = compose(&compose(&f, &g).unwrap(), &k).unwrap();
        let right = compose(&f, &compose(&g, &k).unwrap()).unwrap();
        // the two orders clamp differently near the border; samples reach at
        // most 6 px plus one bilinear neighbour
        let err = max_diff(&left, &right, 7);
        prop_assert!(err < 0.05, "max deviation {}", err);
        Ok(())
    })
}

pub fn folding_ratio_in_unit_interval(cases: u32) -> Result<(), String> {
    let s = (dims(), 0.0f64..4.0).prop_flat_map(|((w, h), amp)| noise_field(w, h, amp));
    run(cases, s, |f| {
        let r = folding_ratio(&f);
        prop_assert!((0.0..=1.0).contains(&r));
        Ok(())
    })
}

pub fn scaled_constant_never_folds(cases: u32) -> Result<(), String> {
    let s = (dims(), vector(50.0), 0.0f64..=1.0);
    run(cases, s, |((w, h), v, alpha)| {
        let f = FlowField::constant(w, h, v).scaled(alpha);
        prop_assert_eq!(folding_ratio(&f), 0.0);
        Ok(())
    })
}

pub fn constant_inverse_fb_vanishes(cases: u32) -> Result<(), String> {
    let s = (dims(), vector(6.0));
    run(cases, s, |((w, h), v)| {
        let f = FlowField::constant(w, h, v);
        let r = fb_residual(&f, &f.scaled(-1.0)).unwrap();
        prop_assert!(r.mean < 1e-3 && r.r01.max() < 1e-3 && r.r10.max() < 1e-3);
        Ok(())
    })
}

pub fn integer_shift_warps_agree(cases: u32) -> Result<(), String> {
    let s = (image(), -3i32..=3, -3i32..=3, 0.1f64..0.9);
    run(cases, s, |(img, dx, dy, level)| {
        let (w, h) = img.dims();
        let f = FlowField::constant(w, h, [dx as f64, dy as f64]);
        let a = warp(&img, &f).unwrap().threshold(level);
        let b = warp_nearest(&img.threshold(level), &f).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as i32 + dx, y as i32 + dy);
                if sx >= 0 && sy >= 0 && sx < w as i32 && sy < h as i32 {
                    prop_assert_eq!(a.get(x, y), b.get(x, y));
                } else {
                    prop_assert!(!b.get(x, y));
                }
            }
        }
        Ok(())
    })
}
