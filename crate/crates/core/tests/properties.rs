use nalgebra::{DMatrix, DVector, RowDVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use platoon_shield::config::ScenarioConfig;
use platoon_shield::linalg::{
    discretize, distance_to_halfspace_formula, distance_to_halfspace_oracle, expm, mc_reach_sample,
    project_ellipsoid, quad_form, Ellipsoid, HalfSpace,
};
use platoon_shield::model::{
    build_closed_loop, build_plant, recover_delta, reference_bounds, reference_vehicle, residual, VehicleParams,
};
use platoon_shield::pipeline::DesignFile;
use platoon_shield::sdp::{self, ellipsoid_level, ellipsoid_program, grid_search, solve, verify, GridSpec, SolverOptions};
use platoon_shield::simulator::{
    simulate, stealthy_attack_step, AttackPolicy, DisturbanceSpec, InitialEstimate, LeadInput, SimConfig,
};
use platoon_shield::synthesis::{eig_ae, GainBounds};

fn mat(n: usize, m: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v) * scale)
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (mat(n, n, 1.0), 0.05..2.0f64).prop_map(move |(m, shift)| &m * m.transpose() + DMatrix::identity(n, n) * shift)
}

fn vehicle() -> impl Strategy<Value = VehicleParams> {
    (0.2..2.0f64, 0.05..1.0f64, 0.01..0.2f64).prop_map(|(h, tau, ts)| VehicleParams {
        h,
        tau,
        ts,
        ..reference_vehicle()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expm_group_property(m in (1usize..6).prop_flat_map(|n| mat(n, n, 1.0)), s in 0.1..5.0f64) {
        let n = m.nrows();
        let m = &m * (s / m.norm().max(1e-12));
        let prod = expm(&m).unwrap() * expm(&(-&m)).unwrap();
        prop_assert!((prod - DMatrix::identity(n, n)).amax() < 1e-9);
    }

    #[test]
    fn discretize_converges_to_continuous(ac in mat(3, 3, 1.0), bc in mat(3, 1, 1.0)) {
        // the O(Ts) error should shrink roughly tenfold per decade
        let err = |ts: f64| {
            let (a, b) = discretize(&ac, std::slice::from_ref(&bc), ts).unwrap();
            let ea = ((&a - DMatrix::identity(3, 3)) / ts - &ac).amax();
            let eb = (&b[0] / ts - &bc).amax();
            ea.max(eb)
        };
        let (e2, e3) = (err(1e-2), err(1e-3));
        prop_assert!(e2 < 1e-1 && e3 < 1e-2);
        prop_assert!(e3 <= e2 * 0.2 + 1e-12);
    }

    #[test]
    fn projection_contains_dropped_boundary(p in spd(4), alpha in 0.1..10.0f64, seed in any::<u64>()) {
        use rand::Rng;
        let e = Ellipsoid::new(p, alpha).unwrap();
        let proj = project_ellipsoid(&e, &[0, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let z = e.boundary_point(&u);
            let x = DVector::from_row_slice(&[z[0], z[2]]);
            prop_assert!(quad_form(proj.shape(), &x) <= proj.level() * (1.0 + 1e-9) + 1e-9);
        }
    }

    #[test]
    fn oracle_matches_support_function(p in spd(3), alpha in 0.1..10.0f64, c in mat(3, 1, 1.0), b in -5.0..5.0f64) {
        prop_assume!(c.norm() > 1e-3);
        let c = c.column(0).into_owned();
        let e = Ellipsoid::new(p.clone(), alpha).unwrap();
        let h = HalfSpace::new(c.clone(), b).unwrap();
        let pinv_c = p.clone().cholesky().unwrap().solve(&c);
        let support = (alpha * c.dot(&pinv_c)).sqrt();
        let analytic = (b - support) / c.norm();
        prop_assert!((distance_to_halfspace_oracle(&e, &h) - analytic).abs() < 1e-10 * (1.0 + analytic.abs()));
        let formula = (b.abs() - (c.dot(&pinv_c) / alpha).sqrt()) / c.dot(&c);
        prop_assert_eq!(distance_to_halfspace_formula(&e, &h), formula);
    }

    #[test]
    fn attack_round_trips_on_attacked_channels(params in vehicle(), e in mat(5, 1, 3.0), w in mat(4, 1, 0.1), d in mat(2, 1, 10.0)) {
        let plant = build_plant(&params).unwrap();
        let (e, w, d) = (e.column(0).into_owned(), w.column(0).into_owned(), d.column(0).into_owned());
        let r = residual(&plant, &e, &w, &d);
        prop_assert!((recover_delta(&r, &e, &w, &plant) - d).amax() < 1e-12 * (1.0 + r.amax()));
    }

    #[test]
    fn closed_loop_structure(params in vehicle(), kp in -2.0..2.0f64, kd in -2.0..2.0f64) {
        let plant = build_plant(&params).unwrap();
        let cl = build_closed_loop(&plant, &RowDVector::from_row_slice(&[kp, kd]));
        prop_assert_eq!(&cl.b[4], &(-&cl.b[3]));
        prop_assert_eq!(cl.acal.view((0, 0), (5, 5)).into_owned(), plant.a.clone());
        let (a_u, b_u) = ((-params.ts / params.h).exp(), 1.0 - (-params.ts / params.h).exp());
        prop_assert!((plant.a_u - a_u).abs() < 1e-12 && (plant.b_u - b_u).abs() < 1e-12);
    }

    #[test]
    fn gain_bounds_place_the_poles(lambda in -0.5..-0.005f64, s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let g = GainBounds::new(0.1, lambda).unwrap();
        let kd = g.kd_lower + s * (g.kd_upper - g.kd_lower);
        let kp_lo = g.kp_lower(kd);
        // pick kp between its lower bound and the cross-condition limit
        let mut kp = kp_lo + t * 1.0;
        while g.cross_margin(kp, kd) <= 0.0 && kp > kp_lo {
            kp = kp_lo + (kp - kp_lo) * 0.5;
        }
        prop_assume!(g.margins(kp, kd).iter().all(|(_, m)| *m > 1e-9));
        let worst = eig_ae(&[kp, kd], 0.1).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(worst < lambda + 1e-9, "kp {kp} kd {kd} worst {worst}");
        prop_assert!(kp > 0.0 && kd > 0.0 && kd > kp * 0.1);
    }

    #[test]
    fn config_round_trip(seed in any::<u64>(), steps in 1usize..5000, vehicles in 1usize..6, step in 0.01..0.5f64) {
        let mut cfg = ScenarioConfig::reference();
        cfg.simulation.seed = seed;
        cfg.simulation.steps = steps;
        cfg.simulation.vehicles = vehicles;
        cfg.simulation.attacked_vehicle = vehicles;
        cfg.synthesis.grid_step = step;
        let back = ScenarioConfig::from_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

fn quiet_config(steps: usize, seed: u64) -> SimConfig {
    SimConfig {
        steps,
        seed,
        vehicles: 2,
        lead_input: LeadInput::ExpDecay {
            amplitude: 2.0,
            rate: 0.1,
        },
        disturbances: DisturbanceSpec {
            w_d: 0.07,
            w_u: 0.01,
            w_e: 0.07,
        },
        attack: AttackPolicy::RandomBounded { magnitude: 0.5 },
        attacked_vehicle: 2,
        initial_states: vec![[0.0; 5]],
        initial_estimate: InitialEstimate::Exact,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulation_is_linear_in_inputs(seed in any::<u64>(), lambda in 0.1..1.0f64) {
        // λ ≤ 1 keeps the scaled noise inside its bounds, so clipping never breaks linearity
        let plant = build_plant(&reference_vehicle()).unwrap();
        let design = DesignFile::baseline().design();
        let cfg = quiet_config(200, seed);
        let a = simulate(&plant, &reference_bounds(), &design, &cfg).unwrap();
        let b = simulate(&plant, &reference_bounds(), &design, &cfg.scaled_inputs(lambda)).unwrap();
        prop_assert_eq!(a.clipped_samples, 0);
        for (va, vb) in a.vehicles.iter().zip(&b.vehicles) {
            for (ra, rb) in va.iter().zip(vb) {
                let scale = ra.x.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
                for (xa, xb) in ra.x.iter().zip(&rb.x) {
                    prop_assert!((xa * lambda - xb).abs() <= 1e-9 * scale * lambda.max(1.0));
                }
            }
        }
    }

    #[test]
    fn simulation_is_deterministic(seed in any::<u64>()) {
        let plant = build_plant(&reference_vehicle()).unwrap();
        let design = DesignFile::baseline().design();
        let mut cfg = quiet_config(150, seed);
        cfg.initial_estimate = InitialEstimate::Random { spread: 0.5 };
        let a = simulate(&plant, &reference_bounds(), &design, &cfg).unwrap();
        let b = simulate(&plant, &reference_bounds(), &design, &cfg).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn stealthy_attacker_stays_under_margin(
        e in mat(5, 1, 0.5), w in mat(4, 1, 0.05), g in mat(4, 1, 1.0), gamma in 0.0..1.0f64,
    ) {
        let plant = build_plant(&reference_vehicle()).unwrap();
        let pi = DesignFile::baseline().pi;
        let s = stealthy_attack_step(&plant, &e.column(0).into_owned(), &w.column(0).into_owned(), &pi, &g.column(0).into_owned(), gamma);
        if s.feasible {
            prop_assert!(s.z <= gamma + 1e-12);
        }
        let r = residual(&plant, &e.column(0).into_owned(), &w.column(0).into_owned(), &s.delta);
        prop_assert!((r - s.residual).amax() < 1e-12);
    }

    #[test]
    fn stealthy_simulation_never_alarms(seed in any::<u64>()) {
        let plant = build_plant(&reference_vehicle()).unwrap();
        let design = DesignFile::baseline().design();
        let mut cfg = quiet_config(300, seed);
        cfg.attack = AttackPolicy::StealthyGreedy { target: None, gamma: 0.999, lookahead: 20 };
        let t = simulate(&plant, &reference_bounds(), &design, &cfg).unwrap();
        prop_assert_eq!(t.stealth_infeasible_steps, 0);
        prop_assert!(t.vehicles.iter().flatten().all(|r| !r.alarm && r.z <= 1.0));
    }
}

fn stable_system(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    use rand::Rng;
    let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
    let rho = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let a = m * (rng.gen_range(0.3..0.9) / rho.max(1e-9));
    let b = (0..2)
        .map(|_| DMatrix::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn monte_carlo_stays_in_certified_ellipsoid(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a_sys, b) = stable_system(&mut rng);
        let w = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 4.0)];
        let out = grid_search(
            &GridSpec { axes: vec![("a".into(), sdp::unit_grid(0.1))], refinement_rounds: 0 },
            &SolverOptions::default(),
            |p| {
                let ep = ellipsoid_program(&a_sys, &b, &w, p[0]);
                Ok((ep.program.clone(), ep))
            },
        ).unwrap();
        let p = out.solution.sym(&out.payload.p);
        let a = out.point[0];
        prop_assert!(verify(&out.payload.program, &out.solution.x, 1e-6).pass);
        for traj in mc_reach_sample(&a_sys, &b, &w, 200, 50, seed).unwrap() {
            for (k, z) in traj.iter().enumerate() {
                prop_assert!(quad_form(&p, z) <= ellipsoid_level(a, 2, 0.0, k + 1) + 1e-6);
            }
        }
    }

    #[test]
    fn feasibility_survives_constraint_scaling(seed in any::<u64>(), gamma in 0.1..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a_sys, b) = stable_system(&mut rng);
        let w = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)];
        let ep = ellipsoid_program(&a_sys, &b, &w, 0.95);
        let sol = solve(&ep.program, &SolverOptions::default()).unwrap();
        let base = verify(&ep.program, &sol.x, 1e-6).pass;
        let mut scaled = ep.program.clone();
        scaled.scale_constraints(gamma);
        prop_assert_eq!(verify(&scaled, &sol.x, 1e-6 * gamma).pass, base);
    }

    #[test]
    fn grid_winner_ignores_enumeration_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a_sys, b) = stable_system(&mut rng);
        let w = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)];
        let run = |vals: Vec<f64>| {
            grid_search(
                &GridSpec { axes: vec![("a".into(), vals)], refinement_rounds: 0 },
                &SolverOptions::default(),
                |p| {
                    let ep = ellipsoid_program(&a_sys, &b, &w, p[0]);
                    Ok((ep.program.clone(), ()))
                },
            ).unwrap()
        };
        let fwd = run(vec![0.5, 0.7, 0.9]);
        let rev = run(vec![0.9, 0.5, 0.7]);
        prop_assert_eq!(fwd.point, rev.point);
        prop_assert_eq!(fwd.solution.x, rev.solution.x);
    }
}
