use approx::assert_relative_eq;
use hallkit::adiabatic::{driving_profile, DriveKind};
use hallkit::kubo::{conjugate_by_phases, kubo_trace_dense, BulkWindow};
use hallkit::model::{build_hofstadter, make_switch, Boundary, Direction, LatticeSpec, PotentialSpec, PotentialTerm};
use hallkit::poly::{bump, smoothstep};
use hallkit::snapshot::{eigensystem_from_bytes, eigensystem_to_bytes, model_hash, ModelSnapshot};
use hallkit::spectral::{diagonalize, fermi_projector, widest_gap_center};
use ndarray::Array1;
use proptest::prelude::*;

proptest! {
    #[test]
    fn smoothstep_is_a_symmetric_monotone_ramp(k in 1u32..8, x in 0.0f64..=1.0) {
        let p = smoothstep(k);
        let y = p.eval(x);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&y));
        prop_assert!((y + p.eval(1.0 - x) - 1.0).abs() < 1e-10);
        prop_assert!(p.derivative().eval(x) >= -1e-10);
    }

    #[test]
    fn ramp_and_bump_are_flat_at_the_ends(k in 1u32..8) {
        for p in [smoothstep(k), bump(k)] {
            for n in 1..=k as usize {
                let d = p.derivative_n(n);
                prop_assert!(d.eval(0.0).abs() < 1e-9 && d.eval(1.0).abs() < 1e-6 * (1.0 + d.eval(0.5).abs()));
            }
        }
        prop_assert_eq!(smoothstep(k).eval(1.0), 1.0);
    }

    #[test]
    fn phase_matches_its_antiderivative(k in 1u32..6, s in 0.0f64..=1.0, amplitude in -3.0f64..3.0) {
        for kind in [DriveKind::Ramp, DriveKind::Pulse] {
            let g = driving_profile(kind, k).unwrap().with_amplitude(amplitude);
            // the monomial antiderivative of the bump loses ~1e-12 to cancellation near s = 1
            prop_assert!((g.phi(s) - g.phi_exact(s)).abs() < 1e-10 * (1.0 + amplitude.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn snapshots_round_trip_exactly(q in 2u32..5, cells in 2usize..4, lambda in 0.0f64..0.4, cx in -1.0f64..1.0) {
        let spec = LatticeSpec::new(q as usize * cells, 1, q, Boundary::Torus);
        let pot = PotentialSpec::gaussian_bumps(vec![PotentialTerm { center: [cx, 0.5], width: 1.2, amplitude: 1.0 }])
            .normalized_on_lattice(&spec);
        let model = build_hofstadter(&spec, &pot, lambda, None).unwrap();
        let snap = ModelSnapshot::of(&model);
        let back = ModelSnapshot::from_bytes(&snap.to_bytes()).unwrap();
        prop_assert_eq!(back.hamiltonian().unwrap(), model.hamiltonian.clone());
        prop_assert_eq!(back.content_hash(), model_hash(&model));
        let eig = diagonalize(&model).unwrap();
        let again = eigensystem_from_bytes(&eigensystem_to_bytes(&eig)).unwrap();
        prop_assert_eq!(again.energies, eig.energies);
        prop_assert_eq!(again.vectors, eig.vectors);
    }

    #[test]
    fn kubo_trace_is_gauge_invariant(seed in 0u64..1000) {
        let spec = LatticeSpec::new(9, 1, 3, Boundary::Torus);
        let model = build_hofstadter(&spec, &PotentialSpec::zero(), 0.0, None).unwrap();
        let eig = diagonalize(&model).unwrap();
        let (ef, _) = widest_gap_center(&eig, -3.5, -1.0).unwrap();
        let p = fermi_projector(&eig, ef, None).unwrap().matrix().clone();
        let a = make_switch(Direction::X1, 1.0, 3, &model).unwrap().matrix();
        let b = make_switch(Direction::X2, 1.0, 3, &model).unwrap().matrix();
        let w = BulkWindow::square(&model, 2.0);
        let theta: Array1<f64> = (0..model.dim()).map(|i| ((seed + 31 * i as u64) % 97) as f64 * 0.37).collect();
        let k = kubo_trace_dense(&p, &a, &b, &w);
        let k2 = kubo_trace_dense(&conjugate_by_phases(&p, &theta), &a, &b, &w);
        assert_relative_eq!(k.re, k2.re, epsilon = 1e-12);
        assert_relative_eq!(k.im, k2.im, epsilon = 1e-12);
    }
}
