use mfql::environments::{build_benchmark_spec, BenchmarkParams};
use mfql::oracles::{fixed_point_gap, mfc_solve, mfg_solve, stationary_residuals, NestedOptions};
use mfql::{greedy_policy, ProbabilityVector};

#[test]
fn desk_grid_oracles_solve_and_coincide() {
    let spec = build_benchmark_spec(&BenchmarkParams::desk()).unwrap();
    assert_eq!((spec.n_states(), spec.n_actions()), (21, 21));
    let opts = NestedOptions { tol: 1e-10, ..Default::default() };
    let game = mfg_solve(&spec, &opts, ProbabilityVector::uniform(21)).unwrap();
    let control = mfc_solve(&spec, &opts, spec.zero_q()).unwrap();
    for fp in [&game, &control] {
        let (rt, rp) = stationary_residuals(&fp.q, &fp.mu, &spec);
        assert!(rt < 1e-8 && rp < 1e-8, "residuals {rt:e} {rp:e}");
    }
    // The kernel does not depend on the population and the cost coupling is
    // weak, so both procedures land on the same point.
    let (dq, dmu) = fixed_point_gap(&game, &control).unwrap();
    assert!(dq < 1e-6 && dmu < 1e-6, "gap {dq:e} {dmu:e}");
    assert_eq!(greedy_policy(&game.q), greedy_policy(&control.q));
}
