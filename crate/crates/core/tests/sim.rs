use mpct::sim::{
    benchmark, run_closed_loop, sample_initial_states, step_plant, Formulation, RolloutError,
    Scenario,
};
use mpct::{ReferencePair, SolveStatus};
use nalgebra::{DMatrix, DVector};

fn equilibrium(u: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let m = benchmark::model();
    let u = DVector::from_column_slice(u);
    let lhs = DMatrix::identity(6, 6) - &m.a;
    let x = lhs.lu().solve(&(&m.b * &u)).unwrap();
    (x, u)
}

fn short_scenario(x0: DVector<f64>, steps: usize) -> Scenario {
    Scenario {
        problem: benchmark::problem(),
        reference: benchmark::reference(),
        initial_state: x0,
        steps,
    }
}

#[test]
fn equilibrium_start_stays_put() {
    let (xe, ue) = equilibrium(&[0.5, 0.5]);
    let mut scn = short_scenario(xe.clone(), 10);
    scn.reference = ReferencePair {
        x: xe.clone(),
        u: ue.clone(),
    };
    scn.problem.eps_p = 1e-8;
    scn.problem.eps_d = 1e-8;
    let trace = run_closed_loop(&scn, Formulation::Soft).unwrap();
    for s in &trace.steps {
        assert_eq!(s.status, SolveStatus::Converged);
        assert!((&s.u - &ue).amax() < 1e-5, "step {}: u = {}", s.t, s.u);
        assert!((&s.x - &xe).amax() < 1e-5);
    }
}

#[test]
fn replaying_inputs_reproduces_states() {
    let x0 = benchmark::closed_loop_initial_state();
    let trace = run_closed_loop(&short_scenario(x0.clone(), 20), Formulation::Soft).unwrap();
    let model = benchmark::model();
    let mut x = x0;
    for s in &trace.steps {
        assert_eq!(s.x, x);
        let (next, y) = step_plant(&model, &x, &s.u);
        assert_eq!(s.y, y);
        x = next;
    }
    assert_eq!(trace.final_state, x);
}

#[test]
fn applied_inputs_respect_hard_limits() {
    let trace = run_closed_loop(&benchmark::output_limit_scenario(), Formulation::Soft).unwrap();
    assert_eq!(trace.steps.len(), benchmark::CLOSED_LOOP_STEPS);
    for s in &trace.steps {
        assert!(
            s.u.iter().all(|&u| (0.0..=1.0).contains(&u)),
            "step {}: {}",
            s.t,
            s.u
        );
    }
}

#[test]
fn hard_output_limits_abort_at_first_step() {
    let err = run_closed_loop(&benchmark::output_limit_scenario(), Formulation::Hard).unwrap_err();
    assert_eq!(err, RolloutError::AbortedInfeasible { step: 0 });
}

#[test]
fn rollouts_are_deterministic() {
    let states = sample_initial_states(&benchmark::initial_state_box(), 3, 11).unwrap();
    assert_eq!(
        states,
        sample_initial_states(&benchmark::initial_state_box(), 3, 11).unwrap()
    );
    for x0 in states {
        let a = run_closed_loop(&short_scenario(x0.clone(), 8), Formulation::Soft).unwrap();
        let b = run_closed_loop(&short_scenario(x0, 8), Formulation::Soft).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca, false).unwrap();
        b.write_csv(&mut cb, false).unwrap();
        assert_eq!(ca, cb);
    }
}

#[test]
fn trace_csv_layout() {
    let trace = run_closed_loop(&short_scenario(DVector::zeros(6), 4), Formulation::Soft).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(
        lines[0],
        "t,x1,x2,x3,x4,x5,x6,u1,u2,y1,y2,iters,status,time_s"
    );
    for (t, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 14);
        assert_eq!(cells[0], t.to_string());
        assert_eq!(cells[12], "Converged");
        assert!(cells[13].parse::<f64>().unwrap() > 0.0);
    }
    let summary = trace.summary(false).unwrap();
    assert_eq!(summary.steps, 4);
    assert!(summary.time_s.is_none());
    assert_eq!(summary.not_converged, 0);
}
