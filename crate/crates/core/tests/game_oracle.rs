mod support;

use atdm_core::game::{solve_game, Decision, GameConfig, GameInputs, Player, PlayerStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracle::{self, Instance};

#[test]
fn solver_output_is_a_mutual_best_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut stoppers = 0;
    for k in 0..400 {
        let inst = oracle::random_instance(&mut rng);
        let sol = solve_game(&inst.players, &inst.config, &inst.inputs)
            .unwrap_or_else(|e| panic!("instance {k}: {e}"));
        let v = oracle::violations(&sol.decisions, &inst, inst.config.epsilon);
        assert!(v.is_empty(), "instance {k}: {v:?}");
        for (i, c) in sol.costs.iter().enumerate() {
            let direct = oracle::cost(i, &sol.decisions, &inst);
            assert!((c.total - direct).abs() < 1e-9, "instance {k} agent {i}: {} vs {direct}", c.total);
        }
        stoppers += sol.decisions.iter().filter(|d| d.block > 0).count();
    }
    // The generator must exercise charging plans, not only drive-through.
    assert!(stoppers > 100, "only {stoppers} charging plans");
}

#[test]
fn oracle_flags_a_profitable_deviation() {
    let config = GameConfig {
        horizon_intervals: 4,
        half_width: 1,
        ..GameConfig::default()
    };
    let mut xi = vec![0.5; 5];
    xi[3] = 0.0;
    xi[2] = 0.0;
    xi[4] = 0.0;
    let inputs = GameInputs {
        predicted_price: vec![0.205; 5],
        xi_h: xi,
    };
    let params = atdm_core::game::AgentParams {
        id: 0,
        capacity_kwh: 60.0,
        efficiency: 0.9,
        alpha: 0.1,
        soc_ref: 0.3,
        home_price: 0.205,
    };
    let inst = Instance {
        players: vec![Player {
            params,
            soc: 0.5,
            status: PlayerStatus::Arriving,
            carried: None,
        }],
        config,
        inputs,
    };
    // Driving on meets the congestion; waiting three intervals avoids it.
    let stay = Decision::no_stop(5);
    assert!(!oracle::violations(&[stay], &inst, 1e-6).is_empty());
    let sol = solve_game(&inst.players, &inst.config, &inst.inputs).unwrap();
    assert_eq!(sol.decisions[0].block, 3);
    assert!(oracle::violations(&sol.decisions, &inst, 1e-6).is_empty());
}
