use paradjoint::adjoint::{sensitivity_series, window_instants, AdjointContext, Qoi, SolveMode};
use paradjoint::mna::assemble;
use paradjoint::netlist::{
    b6_bridge_reduced, half_wave_rectifier, parse_netlist, B6Options, Netlist,
};
use paradjoint::parareal::{parareal_forward, PararealConfig};
use paradjoint::spectral::rank_parameters;
use paradjoint::transient::{simulate, Scheme, TimeGrid};

fn grid_of(n: &Netlist) -> TimeGrid {
    let tran = n.directives.tran.unwrap();
    TimeGrid::new(0.0, tran.t_end, tran.dt).unwrap()
}

#[test]
fn builtin_fixtures_round_trip_through_text() {
    for stages in [1, 3] {
        let n = b6_bridge_reduced(B6Options {
            ladder_stages: stages,
            ..B6Options::default()
        })
        .unwrap();
        assert_eq!(parse_netlist(&n.to_string()).unwrap(), n);
    }
    let r = half_wave_rectifier();
    assert_eq!(parse_netlist(&r.to_string()).unwrap(), r);
}

#[test]
fn parareal_forward_matches_sequential_on_rectifier() {
    let n = half_wave_rectifier();
    let sys = assemble(&n);
    let grid = grid_of(&n);
    let seq = simulate(&sys, &grid, Scheme::ImplicitEuler).unwrap();
    let mut cfg = PararealConfig::new(8);
    cfg.workers = 1;
    let (par, report) = parareal_forward(
        &sys,
        &seq.states[0],
        &grid,
        Scheme::ImplicitEuler,
        seq.initial,
        &cfg,
    )
    .unwrap();
    assert!(report.converged);
    assert!(report.iterations <= 8);
    let dev = seq
        .states
        .iter()
        .zip(&par.states)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    assert!(dev <= 1e-7, "{dev}");
}

#[test]
fn b6_parareal_adjoint_matches_sequential() {
    let n = b6_bridge_reduced(B6Options::default()).unwrap();
    let sys = assemble(&n);
    let traj = simulate(&sys, &grid_of(&n), Scheme::ImplicitEuler).unwrap();
    let ctx = AdjointContext::new(&sys, &traj).unwrap();
    let qoi = Qoi::parse(&n.directives.sens.as_ref().unwrap().qoi, &sys.dofs).unwrap();
    let params: Vec<usize> = (0..sys.params.len()).collect();
    let t = [19.1e-6];
    let seq = sensitivity_series(&ctx, &qoi, &t, &params, SolveMode::Sequential).unwrap();
    let par = sensitivity_series(
        &ctx,
        &qoi,
        &t,
        &params,
        SolveMode::Parareal(PararealConfig::new(12)),
    )
    .unwrap();
    let scale = seq.values[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in seq.values[0].iter().zip(&par.values[0]) {
        assert!((a - b).abs() <= 1e-7 * scale, "{a} vs {b}");
    }
}

#[test]
fn b6_ranking_is_led_by_switch_capacitances_and_interconnect() {
    let n = b6_bridge_reduced(B6Options::default()).unwrap();
    let sys = assemble(&n);
    let grid = grid_of(&n);
    let traj = simulate(&sys, &grid, Scheme::ImplicitEuler).unwrap();
    let ctx = AdjointContext::new(&sys, &traj).unwrap();
    let sens = n.directives.sens.as_ref().unwrap();
    let qoi = Qoi::parse(&sens.qoi, &sys.dofs).unwrap();
    let instants: Vec<f64> = window_instants(&grid, sens.t_start, sens.t_end)
        .unwrap()
        .into_iter()
        .map(|k| grid.time(k))
        .collect();
    let params: Vec<usize> = (0..sys.params.len()).collect();
    let series = sensitivity_series(&ctx, &qoi, &instants, &params, SolveMode::Sequential).unwrap();
    let top = rank_parameters(&series, 5);
    assert!(top.iter().any(|e| e.param.starts_with("C_DS")), "{top:?}");
    assert!(
        top.iter()
            .any(|e| e.param.starts_with("L_") && e.param.contains('-')),
        "{top:?}"
    );
}
