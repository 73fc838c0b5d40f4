use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{generate, lora_grid, LORA_FITS, SID_FITS, SYNTHETIC_EQ4};
use super::*;

fn sizes(pairs: &[(&str, f64)]) -> Sizes {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn huber_branches() {
    let s = 0.03;
    assert_eq!(huber(0.0, s), 0.0);
    assert!((huber(s, s) - 0.5 * s * s).abs() < 1e-18);
    assert!((huber(2.0 * s, s) - 1.35e-3).abs() < 1e-15);
    assert_eq!(huber(-2.0 * s, s), huber(2.0 * s, s));
}

#[test]
fn huber_smooth_at_threshold() {
    let s = HUBER_SIGMA;
    for sign in [1.0, -1.0] {
        let r = sign * s;
        let h = 1e-7;
        // Value continuity: both branch formulas agree at the boundary.
        assert!((0.5 * r * r - s * (r.abs() - 0.5 * s)).abs() < 1e-18);
        let left = (huber(r - h, s) - huber(r - 2.0 * h, s)) / h;
        let right = (huber(r + 2.0 * h, s) - huber(r + h, s)) / h;
        assert!((left - right).abs() < 1e-6, "{left} vs {right}");
        assert!((crate::autodiff::huber_grad(r, s) - r).abs() < 1e-15);
    }
}

#[test]
fn r_square_examples() {
    let obs = [0.1, 0.2, 0.3];
    assert_eq!(r_square(&obs, &obs), 1.0);
    assert!(r_square(&[0.2, 0.2, 0.2], &obs).abs() < 1e-15);
    assert!((r_square(&[0.1, 0.2, 0.4], &obs) - 0.5).abs() < 1e-12);
}

#[test]
fn eq8_vanishes_without_cf_model() {
    let p = ScalingParams {
        big_b: 3.0,
        b: 0.4,
        ..Default::default()
    };
    let s = sizes(&[("N_LoRA", 5e7), ("N_SA", 0.0)]);
    assert_eq!(eval_eq(EqForm::Eq8, &p, &s).unwrap(), 0.0);
    // The leading size of a base may not be zero.
    let s = sizes(&[("N_LoRA", 0.0), ("N_SA", 1e6)]);
    assert!(matches!(
        eval_eq(EqForm::Eq8, &p, &s),
        Err(ScalingError::NonPositiveSize { .. })
    ));
}

#[test]
fn size_errors() {
    let p = SYNTHETIC_EQ4;
    let err = eval_eq(EqForm::Eq4, &p, &sizes(&[("N_LoRA", 1e7)])).unwrap_err();
    assert!(err.to_string().contains("N_LLM"), "{err}");
    let err = eval_eq(EqForm::Eq4, &p, &sizes(&[("N_LoRA", -1.0), ("N_LLM", 1e9)])).unwrap_err();
    assert!(matches!(err, ScalingError::NonPositiveSize { .. }));
}

fn random_params(rng: &mut ChaCha8Rng) -> ScalingParams {
    ScalingParams {
        r0: rng.random_range(0.05..0.95),
        e: rng.random_range(0.0..0.5),
        big_a: rng.random_range(0.01..10.0),
        big_b: rng.random_range(0.01..10.0),
        a: rng.random_range(0.05..1.0),
        b: rng.random_range(0.05..1.0),
        gamma: rng.random_range(0.0..1.0),
        beta: rng.random_range(0.0..1.0),
        gamma1: rng.random_range(0.0..1.0),
        gamma2: rng.random_range(0.0..1.0),
    }
}

fn random_sizes(rng: &mut ChaCha8Rng) -> Sizes {
    let mut s = Sizes::new();
    for name in ["N_RS", "N_LLM", "N_QT", "N_LoRA", "N_SA", "N_SI", "N_CF"] {
        s.insert(name.to_string(), 10f64.powf(rng.random_range(4.0..10.0)));
    }
    s
}

#[test]
fn eq8_is_eq7_minus_eq6() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let p = random_params(&mut rng);
        let s = random_sizes(&mut rng);
        let d = eval_eq(EqForm::Eq7, &p, &s).unwrap() - eval_eq(EqForm::Eq6, &p, &s).unwrap();
        let g = eval_eq(EqForm::Eq8, &p, &s).unwrap();
        assert!((d - g).abs() < 1e-12, "{d} vs {g}");
    }
}

#[test]
fn stored_tables_evaluate() {
    let s = sizes(&[("N_LoRA", 5e7), ("N_LLM", 4e9)]);
    for row in &LORA_FITS {
        let p = row.params;
        let want = p.r0
            - p.big_a / (5e7 + p.gamma * 4e9).powf(p.a)
            - p.big_b / (5e7 + p.beta * 4e9).powf(p.b);
        let got = eval_eq(EqForm::Eq4, &p, &s).unwrap();
        assert!((got - want).abs() <= 1e-13 * want.abs(), "{}", row.dataset);
        p.validate(EqForm::Eq4).unwrap();
    }
    // Beauty: the first term underflows to zero at this size.
    let beauty = eval_eq(EqForm::Eq4, &LORA_FITS[0].params, &s).unwrap();
    assert!((beauty - (0.3 - 0.34 / (5e7 + 0.021 * 4e9f64).powf(0.0139))).abs() < 1e-15);

    let rs = sizes(&[("N_RS", 1.3e7), ("N_LLM", 1e9), ("N_QT", 1e6)]);
    for row in &SID_FITS {
        let p = row.params;
        let want = p.r0 - p.big_a / 1.3e7f64.powf(p.a) - p.big_b / 1.3e7f64.powf(p.b);
        let got = eval_eq(EqForm::Sid, &p, &rs).unwrap();
        assert!((got - want).abs() <= 1e-13 * want.abs());
        assert_eq!(got, eval_eq(EqForm::Eq3, &p, &rs).unwrap());
        assert!(row.r_square > 0.9);
    }
}

#[test]
fn form_metadata() {
    assert_eq!(
        EqForm::Eq4.params(),
        vec![Param::R0, Param::A, Param::B, Param::ExpA, Param::ExpB, Param::Gamma, Param::Beta]
    );
    assert_eq!(EqForm::Eq8.params(), vec![Param::B, Param::ExpB]);
    assert_eq!(EqForm::Sid.sizes(), vec!["N_RS"]);
    assert_eq!("eq4".parse::<EqForm>().unwrap(), EqForm::Eq4);
    assert_eq!(EqForm::Sid.to_string(), "sid");
}

#[test]
fn points_round_trip() {
    let pts = generate(EqForm::Eq4, &SYNTHETIC_EQ4, &lora_grid()).unwrap();
    let mut buf = Vec::new();
    write_points(&mut buf, &pts).unwrap();
    assert_eq!(read_points(buf.as_slice()).unwrap(), pts);
    let bad = read_points("{\"sizes\": {}, \"recall\": 0.1}\nnot json\n".as_bytes()).unwrap_err();
    assert!(matches!(bad, ScalingError::Format { line: 2, .. }));
}

fn assert_recovered(r: &FitResult, pts: &[ScalingPoint]) {
    let max_err = r
        .predictions
        .iter()
        .zip(pts)
        .map(|(p, o)| (p - o.recall).abs())
        .fold(0.0, f64::max);
    assert!(r.r_square >= 0.9999, "r2 {}", r.r_square);
    assert!(max_err < 1e-6, "max err {max_err}");
    assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
    r.params.validate(r.form).unwrap();
}

#[test]
fn recovers_noise_free_eq4() {
    let pts = generate(EqForm::Eq4, &SYNTHETIC_EQ4, &lora_grid()).unwrap();
    let r = fit(EqForm::Eq4, &pts, &FitOptions::default()).unwrap();
    assert_recovered(&r, &pts);
}

#[test]
fn recovers_noise_free_eq2_and_sid() {
    let p = ScalingParams {
        r0: 0.4,
        big_a: 3.0,
        big_b: 8.0,
        a: 0.3,
        b: 0.5,
        ..Default::default()
    };
    let mut grid = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            grid.push(sizes(&[("N_SI", 1e5 * 4f64.powi(i)), ("N_CF", 2e5 * 3f64.powi(j))]));
        }
    }
    let pts = generate(EqForm::Eq2, &p, &grid).unwrap();
    assert_recovered(&fit(EqForm::Eq2, &pts, &FitOptions::default()).unwrap(), &pts);

    let rs: Vec<Sizes> = (0..10).map(|i| sizes(&[("N_RS", 1e5 * 2f64.powi(i))])).collect();
    let sp = ScalingParams {
        r0: 0.3,
        big_a: 2.0,
        big_b: 40.0,
        a: 0.25,
        b: 0.6,
        ..Default::default()
    };
    let pts = generate(EqForm::Sid, &sp, &rs).unwrap();
    assert_recovered(&fit(EqForm::Sid, &pts, &FitOptions::default()).unwrap(), &pts);
}

#[test]
fn constant_observations_pin_the_offset() {
    let pts: Vec<ScalingPoint> = (0..6)
        .map(|i| ScalingPoint::new(&[("N_RS", 1e6 * (i + 1) as f64)], 0.2375))
        .collect();
    let opts = FitOptions {
        multistart: 4,
        ..FitOptions::default()
    }
    .freeze(Param::A, 0.0)
    .freeze(Param::B, 0.0);
    let r = fit(EqForm::Sid, &pts, &opts).unwrap();
    assert!((r.params.r0 - 0.2375).abs() < 1e-12, "{}", r.params.r0);
    assert_eq!(r.free, vec!["R0", "a", "b"]);
    assert!(r.converged);
}

#[test]
fn fit_is_deterministic() {
    let pts = generate(EqForm::Eq4, &SYNTHETIC_EQ4, &lora_grid()).unwrap();
    let opts = FitOptions {
        multistart: 6,
        ..FitOptions::default()
    };
    let a = fit(EqForm::Eq4, &pts, &opts).unwrap();
    let b = fit(EqForm::Eq4, &pts, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn fit_preconditions() {
    let pts = generate(EqForm::Eq4, &SYNTHETIC_EQ4, &lora_grid()[..3]).unwrap();
    assert!(matches!(
        fit(EqForm::Eq4, &pts, &FitOptions::default()),
        Err(ScalingError::TooFewPoints { needed: 7, got: 3 })
    ));
    let bad = vec![ScalingPoint::new(&[("N_RS", 1e6)], 1.5)];
    let opts = FitOptions::default()
        .freeze(Param::A, 0.0)
        .freeze(Param::B, 0.0)
        .freeze(Param::ExpA, 1.0)
        .freeze(Param::ExpB, 1.0);
    assert!(matches!(
        fit(EqForm::Sid, &bad, &opts),
        Err(ScalingError::InvalidObservation { index: 0, .. })
    ));
}

#[test]
fn heldout_protocol() {
    let pts = generate(EqForm::Eq4, &SYNTHETIC_EQ4, &lora_grid()).unwrap();
    let opts = FitOptions::default();
    let err = heldout_error(EqForm::Eq4, &pts, 0.2, 1, ErrorMetric::LogMse, &opts).unwrap();
    assert!(err < 1e-10, "{err}");
    assert!(matches!(
        heldout_error(EqForm::Eq4, &pts, 0.0, 1, ErrorMetric::LogMse, &opts),
        Err(ScalingError::EmptyHoldout(_))
    ));
}

#[test]
fn free_beta_beats_zero_beta() {
    let truth = ScalingParams {
        beta: 0.2,
        ..SYNTHETIC_EQ4
    };
    let pts = generate(EqForm::Eq4, &truth, &lora_grid()).unwrap();
    let free = heldout_error(EqForm::Eq4, &pts, 0.2, 3, ErrorMetric::LogMse, &FitOptions::default()).unwrap();
    let zero_opts = FitOptions::default().freeze(Param::Beta, 0.0);
    let zero = heldout_error(EqForm::Eq4, &pts, 0.2, 3, ErrorMetric::LogMse, &zero_opts).unwrap();
    assert!(free < zero, "free {free} zero {zero}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn monotone_in_sizes(seed in 0u64..100_000, which in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_params(&mut rng);
        p.gamma = rng.random_range(0.01..1.0);
        p.beta = rng.random_range(0.01..1.0);
        p.gamma1 = rng.random_range(0.01..1.0);
        p.gamma2 = rng.random_range(0.01..1.0);
        let s = random_sizes(&mut rng);
        let name = ["N_RS", "N_LLM", "N_QT", "N_LoRA", "N_SA", "N_SI", "N_CF"][which];
        let mut bigger = s.clone();
        *bigger.get_mut(name).unwrap() *= 1.5;
        for form in [EqForm::Eq2, EqForm::Eq3, EqForm::Eq4] {
            if form.sizes().contains(&name) {
                let lo = eval_eq(form, &p, &s).unwrap();
                let hi = eval_eq(form, &p, &bigger).unwrap();
                // Strict in exact arithmetic; a term may round below one ulp.
                prop_assert!(hi >= lo, "{form} {name}");
            }
        }
        let lo = eval_eq(EqForm::Eq8, &p, &s).unwrap();
        let hi = eval_eq(EqForm::Eq8, &p, &bigger).unwrap();
        match name {
            "N_SA" => prop_assert!(hi > lo),
            "N_LoRA" => prop_assert!(hi < lo),
            _ => prop_assert_eq!(hi, lo),
        }
    }
}
