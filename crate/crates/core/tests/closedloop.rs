use std::path::{Path, PathBuf};

use hiercoord::closedloop::*;
use hiercoord::config::load_system;

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("benchmarks/scenarios")
        .join(name)
}

fn decoupled() -> hiercoord::system::System {
    load_system(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/decoupled.toml")).unwrap()
}

#[test]
fn plant_step_keeps_equilibrium() {
    for plant in [build_coldbox_4ss().unwrap(), build_coldbox_2ss().unwrap()] {
        let (x, u, d) = operating_point(&plant);
        let step = step_plant(&plant, &x, &u, &d).unwrap();
        for (a, b) in step.x_next.iter().flatten().zip(x.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12, "{}: {a} vs {b}", plant.name);
        }
    }
}

#[test]
fn plant_rejects_inputs_outside_boxes() {
    let plant = build_coldbox_4ss().unwrap();
    let (x, mut u, d) = operating_point(&plant);
    u[0][1] = 120.0;
    assert!(step_plant(&plant, &x, &u, &d).is_err());
}

#[test]
fn heat_disturbance_lowers_level() {
    let plant = build_coldbox_4ss().unwrap();
    let (x, u, mut d) = operating_point(&plant);
    d[0][0] += 1.0;
    let step = step_plant(&plant, &x, &u, &d).unwrap();
    assert!(step.x_next[0][0] < x[0][0]);
}

#[test]
fn equilibrium_scenario_costs_nothing() {
    let plant = build_coldbox_4ss().unwrap();
    let scenario = Scenario::load(&scenario_path("equilibrium.toml")).unwrap();
    for (strategy, hierarchical) in [
        (build_coldbox_4ss().unwrap(), true),
        (build_coldbox_2ss().unwrap(), true),
        (build_coldbox_4ss().unwrap(), false),
    ] {
        let trace = if hierarchical {
            run_hierarchical(&plant, &strategy, &scenario).unwrap()
        } else {
            run_decentralized(&plant, &strategy, &scenario).unwrap()
        };
        assert!(trace.failure.is_none(), "{:?}", trace.failure);
        assert_eq!(trace.rows.len(), scenario.steps);
        let first = &trace.rows[0].y;
        for row in &trace.rows {
            for (a, b) in row.y.iter().zip(first) {
                assert!(
                    (a - b).abs() <= 1e-8,
                    "{}: output drifted {a} vs {b}",
                    trace.strategy
                );
            }
        }
        let report = closed_loop_cost(&trace, &plant, &scenario).unwrap();
        assert!(
            report.j_c_cl.abs() <= 1e-8,
            "{}: {}",
            trace.strategy,
            report.j_c_cl
        );
        assert_eq!(report.violation_integral_total, 0.0);
    }
}

fn one_row_trace(plant: &hiercoord::system::System, y: Vec<f64>) -> ClosedLoopTrace {
    let (_, u, _) = operating_point(plant);
    ClosedLoopTrace {
        scenario: "unit".into(),
        strategy: "manual".into(),
        ts: plant.ts(),
        u_names: vec!["qa".into(), "qb".into()],
        y_names: vec!["La".into(), "Lb".into()],
        v_names: vec![],
        v_presumed_names: vec![],
        r_names: vec![],
        subsystem_names: vec!["tank_a".into(), "tank_b".into()],
        rows: vec![TraceRow {
            step: 0,
            time_s: 0.0,
            u: u.concat(),
            y,
            v: vec![],
            v_presumed: vec![],
            r_d: vec![],
            r_opt: vec![],
            j_c: 0.0,
            stage_costs: vec![],
            sigma_used: 0,
            evaluations: 0,
            converged: true,
            alpha: 1.0,
            presumption_error: 0.0,
            nmpc_budget_hits: 0,
            nmpc_calls: 0,
            walltime_ms_mpc: 0.0,
            walltime_ms_nmpc: 0.0,
            walltime_ms_cycle: 0.0,
        }],
        failure: None,
    }
}

#[test]
fn closed_loop_cost_examples() {
    let plant = decoupled();
    let scenario = Scenario::parse("name = \"unit\"\nsteps = 1\n", "unit").unwrap();
    let zero = one_row_trace(&plant, vec![2.0, 3.0]);
    assert_eq!(
        closed_loop_cost(&zero, &plant, &scenario).unwrap().j_c_cl,
        0.0
    );

    // unit deviation on the output weighted 1e4
    let mut trace = one_row_trace(&plant, vec![3.0, 3.0]);
    let report = closed_loop_cost(&trace, &plant, &scenario).unwrap();
    assert_eq!(report.j_c_cl, 1e4);
    assert_eq!(report.per_subsystem[0].j_cl, 1e4);
    assert_eq!(report.per_subsystem[1].j_cl, 0.0);

    let mut second = trace.rows[0].clone();
    second.step = 1;
    trace.rows.push(second);
    assert_eq!(
        closed_loop_cost(&trace, &plant, &scenario).unwrap().j_c_cl,
        1e4
    );

    trace.rows.clear();
    assert!(closed_loop_cost(&trace, &plant, &scenario).is_err());
}

#[test]
fn vacuous_coordination_matches_decentralized() {
    let plant = decoupled();
    let text = r#"
        name = "steps"
        steps = 25
        setpoint_range = 0.0
        [coordinator]
        grid_size = 1
        [[desired]]
        signal = "La"
        points = [[0, 2.0], [3, 2.5]]
        [[desired]]
        signal = "Lb"
        points = [[0, 3.0], [8, 2.6]]
        [[disturbance]]
        signal = "leak"
        points = [[0, 0.0], [12, 0.3]]
    "#;
    let scenario = Scenario::parse(text, "steps").unwrap();
    let h = run_hierarchical(&plant, &plant, &scenario).unwrap();
    let d = run_decentralized(&plant, &plant, &scenario).unwrap();
    assert!(h.failure.is_none() && d.failure.is_none());
    assert_eq!(h.rows.len(), d.rows.len());
    for (a, b) in h.rows.iter().zip(&d.rows) {
        assert_eq!(a.u, b.u, "step {}", a.step);
        assert_eq!(a.y, b.y, "step {}", a.step);
        assert_eq!(a.stage_costs, b.stage_costs);
    }
    // the set-point step is tracked
    let last = h.rows.last().unwrap();
    assert!((last.y[0] - 2.5).abs() < 0.025, "{:?}", last.y);
}

#[test]
fn applied_inputs_stay_in_boxes() {
    let plant = build_coldbox_4ss().unwrap();
    let mut scenario = Scenario::load(&scenario_path("constraint.toml")).unwrap();
    scenario.steps = 70;
    let trace = run_decentralized(&plant, &plant, &scenario).unwrap();
    let bounds = [(0.0, 55.0), (0.0, 100.0), (0.0, 12.0)];
    for row in &trace.rows {
        for (u, (lo, hi)) in row.u.iter().zip(bounds) {
            assert!(*u >= lo && *u <= hi);
        }
    }
}

#[test]
fn csv_round_trip_and_comparison() {
    let plant = build_coldbox_4ss().unwrap();
    let mut scenario = Scenario::load(&scenario_path("constraint.toml")).unwrap();
    scenario.steps = 8;
    let trace = run_decentralized(&plant, &plant, &scenario).unwrap();
    let text = trace.to_csv_string().unwrap();
    let parsed = CsvTrace::read(text.as_bytes()).unwrap();
    assert_eq!(parsed.header, trace.header());
    assert_eq!(parsed.rows.len(), 8);
    assert_eq!(&parsed.header[..2], &["step", "time_s"]);
    assert!(parsed.header.iter().any(|h| h == "y:M_out"));
    assert_eq!(parsed.column("time_s").unwrap()[3], 15.0);

    let report = closed_loop_cost(&trace, &plant, &scenario).unwrap();
    let same = Comparison::new(report.clone(), report.clone(), &parsed, &parsed).unwrap();
    assert!(same.rows().iter().all(|r| r.3 == 0.0));
    assert_eq!(same.max_trace_delta, Some(0.0));

    let mut other = report.clone();
    other.scenario = "elsewhere".into();
    assert!(Comparison::new(report, other, &parsed, &parsed).is_err());
}
