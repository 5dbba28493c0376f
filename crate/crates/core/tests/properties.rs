use kerr_core::dynamics::{
    build_hamiltonian, conserved_charge, dispersive_shift_table, perturbative_shift,
    CoupledModeParams,
};
use kerr_core::measurement::{dark_update, Detector};
use kerr_core::prep::{distribution, StateSpec};
use kerr_core::quantum::{
    eigh, evolve, CMatrix, CVector, FockCutoff, FockOperator, FockState, C64,
};
use kerr_core::spectroscopy::{model_spectrum_at, DriveParams};
use kerr_core::trap::{detune_to, hz_to_rad, mode_frequencies, TrapConfig};
use proptest::prelude::*;

fn hermitian(dim: usize, entries: &[(f64, f64)]) -> CMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    let mut it = entries.iter().cycle();
    for i in 0..dim {
        for j in i..dim {
            let &(re, im) = it.next().unwrap();
            if i == j {
                m[(i, i)] = C64::new(re, 0.0);
            } else {
                m[(i, j)] = C64::new(re, im);
                m[(j, i)] = C64::new(re, -im);
            }
        }
    }
    m
}

fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn random_state(dim: usize, entries: &[(f64, f64)]) -> CVector {
    let v = CVector::from_fn(dim, |i, _| {
        let (re, im) = entries[i % entries.len()];
        C64::new(re + 0.01 * i as f64, im)
    });
    let n = v.norm();
    v / C64::new(n, 0.0)
}

fn entries() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..64)
}

fn paper_xi() -> f64 {
    mode_frequencies(&TrapConfig::paper()).unwrap().xi
}

fn shifts(delta: f64, xi: f64, n_report: usize) -> Vec<f64> {
    let cutoff = FockCutoff::new(3, n_report + 4, false).unwrap();
    let p = CoupledModeParams::new(delta, xi, cutoff).unwrap();
    dispersive_shift_table(&p, n_report).unwrap().shift_exact
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn eigh_reconstructs(dim in 1usize..48, e in entries()) {
        let m = hermitian(dim, &e);
        let eig = eigh(&FockOperator::hermitian(m.clone()).unwrap()).unwrap();
        let err = max_abs(&(eig.reconstruct() - &m));
        prop_assert!(err < 1e-9 * max_abs(&m).max(1e-300), "err {err}");
        prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn evolve_composes(dim in 2usize..24, e in entries(), t1 in 0.0..5.0f64, t2 in 0.0..5.0f64) {
        let h = FockOperator::hermitian(hermitian(dim, &e)).unwrap();
        let psi = FockState::Pure(random_state(dim, &e));
        let FockState::Pure(a) = evolve(&evolve(&psi, &h, t1).unwrap(), &h, t2).unwrap() else { unreachable!() };
        let FockState::Pure(b) = evolve(&psi, &h, t1 + t2).unwrap() else { unreachable!() };
        let fidelity = a.dotc(&b).norm_sqr();
        prop_assert!((1.0 - fidelity).abs() < 1e-8, "fidelity {fidelity}");
    }

    #[test]
    fn manifold_charge_is_conserved(
        delta_khz in -100.0..100.0f64,
        xi_khz in 0.0..5.0f64,
        offset_khz in -50.0..50.0f64,
        n_a in 1usize..7,
        n_b in 2usize..26,
    ) {
        let cutoff = FockCutoff::new(n_a, n_b, false).unwrap();
        let p = CoupledModeParams::new(hz_to_rad(delta_khz * 1e3), hz_to_rad(xi_khz * 1e3), cutoff).unwrap();
        let h = build_hamiltonian(&p, hz_to_rad(offset_khz * 1e3)).unwrap();
        let c = h.commutator(&conserved_charge(&cutoff)).unwrap();
        prop_assert!(c.max_abs() < 1e-12 * h.max_abs().max(1e-300));
    }

    #[test]
    fn shift_is_odd_in_delta(delta_khz in 5.0..100.0f64) {
        let xi = paper_xi();
        let delta = hz_to_rad(delta_khz * 1e3);
        let up = shifts(delta, xi, 6);
        let down = shifts(-delta, xi, 6);
        for (a, b) in up.iter().zip(&down) {
            prop_assert!((a + b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn shift_is_monotonic(delta_khz in 5.0..100.0f64) {
        let s = shifts(hz_to_rad(delta_khz * 1e3), paper_xi(), 10);
        prop_assert!(s.windows(2).all(|w| w[1] < w[0]), "{s:?}");
    }

    #[test]
    fn perturbative_agreement_in_dispersive_regime(
        xi_hz in 200.0..3000.0f64,
        factor in 10.0..40.0f64,
        sign in prop::bool::ANY,
    ) {
        let xi = hz_to_rad(xi_hz);
        let n_report = 10;
        let delta = factor * xi * ((n_report + 2) as f64).sqrt() * if sign { 1.0 } else { -1.0 };
        let s = shifts(delta, xi, n_report);
        for (n, exact) in s.iter().enumerate().skip(1) {
            let pert = perturbative_shift(xi, delta, n);
            prop_assert!(((exact - pert) / pert).abs() < 0.15, "n = {n}: {exact} vs {pert}");
        }
    }

    #[test]
    fn model_is_linear(w in 0.0..1.0f64, nbar in 0.1..3.0f64, alpha in 0.1..2.0f64, eta in 0.0..0.9f64, g in 0.0..0.1f64) {
        let centers: Vec<f64> = (0..8).map(|n| -2000.0 * n as f64).collect();
        let grid: Vec<f64> = (0..120).map(|i| -16_000.0 + 150.0 * i as f64).collect();
        let drive = DriveParams::default();
        let a = distribution(&StateSpec::Thermal { nbar }, 7).unwrap().p;
        let b = distribution(&StateSpec::Coherent { alpha: C64::new(alpha, 0.0) }, 7).unwrap().p;
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        let sa = model_spectrum_at(&a, &centers, &drive, &grid, eta, 0.0).unwrap();
        let sb = model_spectrum_at(&b, &centers, &drive, &grid, eta, 0.0).unwrap();
        let sm = model_spectrum_at(&mix, &centers, &drive, &grid, eta, g).unwrap();
        for i in 0..grid.len() {
            let want = w * sa.p_up[i] + (1.0 - w) * sb.p_up[i] + g;
            prop_assert!((sm.p_up[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn distributions_are_valid(
        alpha in 0.0..3.0f64,
        nbar in 0.0..4.0f64,
        r in 0.0..1.0f64,
        n in 0usize..4,
    ) {
        let specs = [
            StateSpec::Coherent { alpha: C64::new(alpha, 0.3 * alpha) },
            StateSpec::Thermal { nbar },
            StateSpec::SqueezedVacuum { r: C64::new(r, 0.0) },
            StateSpec::SqueezedThermal { nbar: nbar / 4.0, r: C64::new(0.0, r) },
            StateSpec::SqueezedFock { n, r: C64::new(r, 0.0) },
        ];
        for spec in specs {
            let d = distribution(&spec, 60).unwrap();
            prop_assert!(d.p.iter().all(|&x| x >= 0.0));
            prop_assert!((d.total() + d.tail - 1.0).abs() < 1e-9, "{spec}: {}", d.total() + d.tail);
        }
        let d = distribution(&StateSpec::Coherent { alpha: C64::new(alpha, 0.0) }, 60).unwrap();
        prop_assert!((d.mean() - alpha * alpha).abs() < 1e-9);
        prop_assert!((d.variance() - alpha * alpha).abs() < 1e-8);
        let d = distribution(&StateSpec::Thermal { nbar }, 60).unwrap().renormalized();
        prop_assert!((d.mean() - nbar).abs() < 1e-3 * (1.0 + nbar));
    }

    #[test]
    fn ideal_dark_update_is_exact(p in prop::collection::vec(0.01..1.0f64, 2..12), pick in 0usize..12) {
        let total: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|x| x / total).collect();
        let n = pick % p.len();
        let state = FockState::from_populations(&p).unwrap();
        let q = dark_update(&state, n, &Detector::IDEAL).unwrap().populations();
        prop_assert_eq!(q[n], 0.0);
        for k in (0..p.len()).filter(|&k| k != n) {
            prop_assert!((q[k] - p[k] / (1.0 - p[n])).abs() < 1e-14);
        }
    }

    #[test]
    fn detune_round_trip(target_khz in -200.0..200.0f64) {
        let target = hz_to_rad(target_khz * 1e3);
        let cfg = detune_to(&TrapConfig::paper(), target).unwrap();
        let delta = mode_frequencies(&cfg).unwrap().delta;
        prop_assert!((delta - target).abs() <= 1e-9 * target.abs().max(hz_to_rad(1.0)));
    }
}

#[test]
fn eigh_reconstructs_at_dim_512() {
    let e: Vec<(f64, f64)> = (0..997)
        .map(|k| {
            (
                ((k * 37) % 101) as f64 / 50.0 - 1.0,
                ((k * 53) % 89) as f64 / 44.0 - 1.0,
            )
        })
        .collect();
    let m = hermitian(512, &e);
    let eig = eigh(&FockOperator::hermitian(m.clone()).unwrap()).unwrap();
    assert!(max_abs(&(eig.reconstruct() - &m)) < 1e-9 * max_abs(&m));
}

#[test]
fn norm_drift_over_many_steps() {
    let e: Vec<(f64, f64)> = (0..61)
        .map(|k| ((k as f64).sin(), (k as f64 * 0.7).cos()))
        .collect();
    let h = FockOperator::hermitian(hermitian(40, &e)).unwrap();
    let eig = eigh(&h).unwrap();
    let mut state = FockState::Pure(random_state(40, &e));
    for _ in 0..10_000 {
        state = eig.evolve(&state, 0.013).unwrap();
    }
    assert!((state.trace() - 1.0).abs() < 1e-9, "{}", state.trace());
}
