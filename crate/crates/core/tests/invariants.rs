mod support;

use atdm_core::ctm::{demand, CellParams, CellTransmissionModel, CtmState, StationCoupling, StretchParams};
use atdm_core::game::solve_game;
use atdm_core::pricing::PriceModel;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracle;

/// A cell whose capacity lies on or below the triangle apex.
fn cell() -> impl Strategy<Value = CellParams> {
    (0.3..1.5f64, 80.0..130.0f64, 10.0..40.0f64, 2_000.0..8_000.0f64, 0.4..1.0f64).prop_map(
        |(len, v, w, rho_max, f)| {
            let apex = v * w * rho_max / (v + w);
            CellParams::new(len, v, w, f * apex, rho_max).unwrap()
        },
    )
}

fn stretch() -> impl Strategy<Value = (StretchParams, Vec<f64>)> {
    prop::collection::vec(cell(), 2..6).prop_flat_map(|cells| {
        let fractions = prop::collection::vec(0.0..=1.0f64, cells.len());
        (Just(cells), fractions).prop_map(|(cells, fr)| {
            let rho = cells.iter().zip(&fr).map(|(c, f)| c.max_density_vehkm * f).collect();
            (StretchParams::new(cells, 5.0).unwrap(), rho)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ctm_step_conserves_and_stays_bounded(
        (params, rho) in stretch(),
        inflow in 0.0..300_000.0f64,
        exit in 0.0..300_000.0f64,
        r2s_share in 0.0..=1.0f64,
        s2r in 0.0..20_000.0f64,
    ) {
        let model = CellTransmissionModel::new(params.clone());
        let state = CtmState::new(&params, rho).unwrap();
        let send0 = demand(&params.cells()[0], state.densities_vehkm[0]).unwrap();
        let coupling = StationCoupling { r2s_vehh: r2s_share * send0, s2r_vehh: s2r };
        let out = model.step(&state, inflow, exit, coupling).unwrap();
        let f = &out.flows;

        let before = params.vehicles(&state);
        let after = params.vehicles(&out.state);
        let moved = params.step_h() * (f.entering() - f.exiting() - f.r2s_vehh + f.s2r_vehh);
        prop_assert!((after - before - moved).abs() <= 1e-9 * before.max(after).max(1.0));

        for (c, &r) in params.cells().iter().zip(&out.state.densities_vehkm) {
            prop_assert!((0.0..=c.max_density_vehkm).contains(&r));
        }
        for (c, (&i, &o)) in params.cells().iter().zip(f.inflow_vehh.iter().zip(&f.outflow_vehh)) {
            prop_assert!(i >= 0.0 && o >= 0.0);
            prop_assert!(i <= c.max_capacity_vehh * (1.0 + 1e-12));
            prop_assert!(o <= c.max_capacity_vehh * (1.0 + 1e-12));
        }
        prop_assert!(f.entering() <= inflow && f.s2r_vehh <= s2r);

        let report = model.extra_travel_time(&state, f);
        for (c, &d) in params.cells().iter().zip(&report.per_cell_extra_h) {
            prop_assert!(d >= 0.0 && d <= 10.0 * c.free_flow_time_h() + 1e-15);
        }
    }

    #[test]
    fn prices_are_floored_and_linear_in_congestion(
        d in 0.0..50.0f64,
        u in 0.0..500.0f64,
        delta in 0.0..0.2f64,
        hour in 7.0..20.0f64,
    ) {
        let model = PriceModel::default().calibrated(0.1).unwrap();
        let b = model.realized_price(hour, d, u, delta);
        prop_assert!(b.price >= 0.0);
        prop_assert!(b.price >= b.demand_component - b.discount_component - 1e-15);
        let half = model.realized_price(hour, d, u, delta / 2.0);
        prop_assert!((2.0 * half.discount_component - b.discount_component).abs() <= 1e-12);
        prop_assert!(model.predicted_price(hour, d, delta) >= 0.0);
        prop_assert!(model.predicted_price(hour, d, delta) >= model.predicted_price(hour, d, 2.0 * delta));
    }

    #[test]
    fn game_profiles_are_feasible_equilibria(seed in any::<u64>()) {
        let inst = oracle::random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let sol = solve_game(&inst.players, &inst.config, &inst.inputs).unwrap();
        let v = oracle::violations(&sol.decisions, &inst, inst.config.epsilon);
        prop_assert!(v.is_empty(), "{:?}", v);
    }
}
