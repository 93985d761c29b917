use dpmem_core::accountant::{
    calibrate_sigma, default_orders, epsilon_for, rdp_subsampled_gaussian, Accountant,
};

/// `log A_α / (α − 1)` from 40-digit numerical quadrature of the mixture moment.
const QUADRATURE: [(f64, f64, f64, f64); 6] = [
    (0.01, 1.0, 2.5, 2.175753322818660e-4),
    (0.01, 1.0, 8.0, 8.936439076060220e-4),
    (0.00064, 1.1, 10.25, 2.724435625431357e-6),
    (0.1, 2.0, 3.75, 5.586623548864987e-3),
    (0.02, 0.8, 32.5, 21.35441078805032),
    (0.2, 1.5, 5.0, 7.875446244384878e-2),
];

#[test]
fn rdp_matches_quadrature() {
    for (q, s, a, want) in QUADRATURE {
        let got = rdp_subsampled_gaussian(q, s, &[a]).unwrap()[0];
        assert!((got - want).abs() / want < 1e-8, "q={q} σ={s} α={a}: {got} vs {want}");
    }
}

#[test]
fn single_full_batch_step_epsilon() {
    // Continuous minimum of α/8 + ln(1e5)/(α−1) is 2.524263 at α = 10.597.
    let r = epsilon_for(2.0, 1e-5, 1.0, 1).unwrap();
    assert!((r.epsilon - 2.524263).abs() < 5e-4, "{r:?}");
    assert_eq!(r.order, Some(10.5));
}

#[test]
fn rdp_shrinks_with_q() {
    let orders: Vec<f64> = default_orders().into_iter().filter(|&a| a <= 8.0).collect();
    let mut prev = rdp_subsampled_gaussian(1.0, 1.0, &orders).unwrap();
    for q in [1e-1, 1e-2, 1e-3] {
        let cur = rdp_subsampled_gaussian(q, 1.0, &orders).unwrap();
        for (c, p) in cur.iter().zip(&prev) {
            assert!(c < p, "q={q}: {c} !< {p}");
        }
        prev = cur;
    }
    assert!(prev.iter().all(|&v| v < 1e-4), "{prev:?}");
}

#[test]
fn rdp_strictly_decreasing_in_sigma() {
    let orders = [1.5, 2.0, 4.75, 16.0, 63.5];
    let mut prev = rdp_subsampled_gaussian(0.01, 0.5, &orders).unwrap();
    for s in [0.7, 1.0, 1.5, 2.5, 4.0, 8.0] {
        let cur = rdp_subsampled_gaussian(0.01, s, &orders).unwrap();
        assert!(cur.iter().zip(&prev).all(|(c, p)| c < p), "σ={s}");
        prev = cur;
    }
}

#[test]
fn full_batch_closed_form_exact() {
    for (s, a) in [(0.7, 2.25), (1.3, 7.0), (3.0, 64.0)] {
        let got = rdp_subsampled_gaussian(1.0, s, &[a]).unwrap()[0];
        assert!((got - a / (2.0 * s * s)).abs() <= 1e-12);
    }
}

#[test]
fn subsampled_never_exceeds_full_batch() {
    let orders = default_orders();
    for q in [0.9, 0.5, 0.05] {
        let sub = rdp_subsampled_gaussian(q, 0.9, &orders).unwrap();
        let full = rdp_subsampled_gaussian(1.0, 0.9, &orders).unwrap();
        assert!(sub.iter().zip(&full).all(|(s, f)| s <= f));
    }
}

#[test]
fn epsilon_grows_with_steps() {
    let a = epsilon_for(1.0, 1e-5, 0.01, 1000).unwrap().epsilon;
    let b = epsilon_for(1.0, 1e-5, 0.01, 2000).unwrap().epsilon;
    assert!(b > a);
}

#[test]
fn calibration_round_trip() {
    let (delta, q, steps) = (2e-5, 32.0 / 50_000.0, 10_000);
    let s8 = calibrate_sigma(8.0, delta, q, steps).unwrap();
    let e8 = epsilon_for(s8, delta, q, steps).unwrap().epsilon;
    assert!((7.92..=8.0).contains(&e8), "{e8}");
    let s16 = calibrate_sigma(1.6, delta, q, steps).unwrap();
    let e16 = epsilon_for(s16, delta, q, steps).unwrap().epsilon;
    assert!((1.584..=1.6).contains(&e16), "{e16}");
    assert!(s16 > s8);
}

#[test]
fn accountant_serializes() {
    let mut acc = Accountant::default();
    acc.record(0.01, 1.0, 3).unwrap();
    let json = serde_json::to_string(&acc).unwrap();
    let back: Accountant = serde_json::from_str(&json).unwrap();
    assert_eq!(back, acc);
}
