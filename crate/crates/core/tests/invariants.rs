//! Property tests for the data-type invariants across modules.

use std::sync::OnceLock;

use cgmpc::closed_loop::{evaluate, simulate, summarize, Controller, EvalConfig, Scenario, ScenarioRow};
use cgmpc::dataset::{generate, grid_states, Dataset, GenerationConfig, GridSpec};
use cgmpc::dynamics::{CstrModel, IntegratorConfig, LinearPlant, PlantModel};
use cgmpc::nlp::NlpProblem;
use cgmpc::ocp::{build_nlp, OcpSpec};
use cgmpc::policy::{InitScheme, MlpPolicy, Normalization};
use cgmpc::sensitivity::{estimate_bounds, reduced_hessian, ReductionMode};
use cgmpc::solver::{kkt_residual, solve, SolverConfig};
use cgmpc::training::{loss_mse, loss_w, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_cstr(horizon: usize) -> OcpSpec {
    OcpSpec {
        horizon,
        ..OcpSpec::cstr_benchmark()
    }
}

fn small_dataset() -> &'static (OcpSpec, Dataset) {
    static CELL: OnceLock<(OcpSpec, Dataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = short_cstr(20);
        let grid = GridSpec::state_box(&spec, 0.1).unwrap();
        let dataset = generate(&spec, &grid, &GenerationConfig::default()).unwrap();
        (spec, dataset)
    })
}

fn box_norm() -> Normalization {
    let spec = OcpSpec::cstr_benchmark();
    Normalization::from_boxes(&spec.x_lo, &spec.x_hi, &spec.u_lo, &spec.u_hi).unwrap()
}

fn in_box() -> impl Strategy<Value = [f64; 2]> {
    (0.0632..0.4632f64, 0.4519..0.8519f64).prop_map(|(a, b)| [a, b])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rhs_has_state_dimension(x1 in 0.0..1.0f64, x2 in 0.05..2.0f64, u in 0.0..2.0f64, a in prop::collection::vec(-2.0..2.0f64, 9), b in prop::collection::vec(-2.0..2.0f64, 6)) {
        let cstr = PlantModel::Cstr(CstrModel::default());
        let mut dx = vec![0.0; cstr.n_x()];
        cstr.rhs(&[x1, x2], &[u], &mut dx).unwrap();
        prop_assert!(dx.iter().all(|v| v.is_finite()));

        let lin = PlantModel::Linear(LinearPlant::new(3, 2, a, b).unwrap());
        let mut dx = vec![0.0; lin.n_x()];
        lin.rhs(&[x1, x2, u], &[u, x1], &mut dx).unwrap();
        prop_assert_eq!(dx.len(), 3);
    }

    #[test]
    fn cstr_parameters_must_be_positive(which in 0..6usize, value in -5.0..=0.0f64) {
        let mut m = CstrModel::default();
        *[&mut m.tau, &mut m.k, &mut m.beta, &mut m.x_f, &mut m.x_c, &mut m.alpha][which] = value;
        prop_assert!(m.validate().is_err());
    }

    #[test]
    fn cstr_needs_positive_second_state(x2 in -1.0..=0.0f64) {
        let mut dx = [0.0; 2];
        prop_assert!(CstrModel::default().rhs(&[0.2, x2], &[1.0], &mut dx).is_err());
    }

    #[test]
    fn integrator_needs_positive_steps(dt in -1.0..=0.0f64, substeps in 1..20usize) {
        let bad_dt = IntegratorConfig { dt, substeps };
        let no_steps = IntegratorConfig { dt: 1.0, substeps: 0 };
        let good = IntegratorConfig { dt: 0.1 - dt, substeps };
        prop_assert!(bad_dt.validate().is_err());
        prop_assert!(no_steps.validate().is_err());
        prop_assert!(good.validate().is_ok());
    }

    #[test]
    fn ocp_spec_rejects_inverted_boxes(d in 0..2usize, shift in 0.0..1.0f64) {
        let mut spec = OcpSpec::cstr_benchmark();
        spec.x_lo[d] = spec.x_hi[d] + shift;
        prop_assert!(spec.validate().is_err());

        let mut spec = OcpSpec::cstr_benchmark();
        spec.u_hi[0] = spec.u_lo[0] - shift;
        prop_assert!(spec.validate().is_err());

        let mut spec = OcpSpec::cstr_benchmark();
        spec.x_sp[d] = spec.x_hi[d] + shift;
        prop_assert!(spec.validate().is_err());

        let mut spec = OcpSpec::cstr_benchmark();
        spec.horizon = 0;
        prop_assert!(spec.validate().is_err());
    }

    #[test]
    fn grid_points_cover_the_box(lo in prop::array::uniform2(-5.0..5.0f64), span in prop::array::uniform2(0.1..3.0f64), step in 0.05..1.0f64) {
        let hi = [lo[0] + span[0], lo[1] + span[1]];
        let grid = GridSpec::new(lo.to_vec(), hi.to_vec(), step).unwrap();
        let points = grid_states(&grid).unwrap();
        prop_assert_eq!(points.len(), grid.len());
        for d in 0..2 {
            let axis = grid.axis(d);
            prop_assert_eq!(axis[0], lo[d]);
            prop_assert!((axis[axis.len() - 1] - hi[d]).abs() < 1e-12);
            prop_assert!(axis.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= step + 1e-12));
        }
        prop_assert!(GridSpec::new(lo.to_vec(), hi.to_vec(), -step).is_err());
        prop_assert!(GridSpec::new(hi.to_vec(), lo.to_vec(), step).is_err());
    }

    #[test]
    fn parameters_round_trip(hidden in prop::collection::vec(1..6usize, 0..3), seed in any::<u64>()) {
        let mut sizes = vec![2];
        sizes.extend(hidden);
        sizes.push(1);
        let p = MlpPolicy::init(seed, &sizes, InitScheme::XavierUniform, box_norm()).unwrap();
        prop_assert!(p.validate().is_ok());
        let theta = p.parameters();
        prop_assert_eq!(theta.len(), p.n_params());
        let mut q = p.clone();
        q.set_parameters(&theta).unwrap();
        prop_assert_eq!(&q, &p);
        let mut bad = theta.clone();
        bad[0] = f64::NAN;
        q.set_parameters(&bad).unwrap();
        prop_assert!(q.validate().is_err());
        prop_assert!(q.set_parameters(&theta[1..]).is_err());
    }

    #[test]
    fn train_config_needs_iterations_and_rates(lr in -1.0..=0.0f64) {
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        prop_assert!(cfg.validate().is_err());
        let cfg = TrainConfig { lr_start: lr, ..TrainConfig::default() };
        prop_assert!(cfg.validate().is_err());
        let cfg = TrainConfig { lr_end: lr, ..TrainConfig::default() };
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn approximate_controller_clips_to_input_box(u in -5.0..7.0f64, x0 in in_box()) {
        let spec = OcpSpec::cstr_benchmark();
        let policy = MlpPolicy::constant(&[2, 3, 1], box_norm(), &[u]).unwrap();
        let run = simulate(
            &Controller::Approx { name: "c".into(), policy },
            &Scenario { x0: x0.to_vec(), steps: 5 },
            &spec,
        );
        for v in &run.inputs {
            prop_assert!(v[0] >= spec.u_lo[0] && v[0] <= spec.u_hi[0]);
        }
        let outside = u < spec.u_lo[0] || u > spec.u_hi[0];
        prop_assert_eq!(run.clipped, if outside { run.inputs.len() } else { 0 });
    }

    #[test]
    fn summary_recomputes_from_rows(excess in prop::collection::vec(prop::option::weighted(0.8, -1e-3..1e-2f64), 1..20)) {
        let rows: Vec<ScenarioRow> = excess
            .iter()
            .enumerate()
            .map(|(i, e)| ScenarioRow {
                scenario: i,
                policy: if i % 2 == 0 { "a".into() } else { "b".into() },
                x0_1: 0.2,
                x0_2: 0.6,
                cost: 1.0 + e.unwrap_or(0.0),
                baseline_cost: 1.0,
                excess: *e,
                clipped: i,
                violation_steps: 0,
                max_violation: 0.0,
                failure: if e.is_none() { Some("x".into()) } else { None },
            })
            .collect();
        let summary = summarize(&rows);
        for (name, s) in &summary {
            let mine: Vec<&ScenarioRow> = rows.iter().filter(|r| &r.policy == name).collect();
            let ok: Vec<f64> = mine.iter().filter_map(|r| r.excess).collect();
            prop_assert_eq!(s.scenarios, mine.len());
            prop_assert_eq!(s.failures, mine.len() - ok.len());
            prop_assert_eq!(s.clipped, mine.iter().map(|r| r.clipped).sum::<usize>());
            if ok.is_empty() {
                prop_assert!(s.mean_excess.is_nan());
            } else {
                let mean = ok.iter().sum::<f64>() / ok.len() as f64;
                prop_assert!((s.mean_excess - mean).abs() <= 1e-15);
                prop_assert_eq!(s.max_excess, ok.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn ocp_derivatives_match_finite_differences(p in in_box(), seed in any::<u64>()) {
        use rand::Rng;
        let spec = OcpSpec::cstr_benchmark();
        let nlp = build_nlp(&spec, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..spec.n_w()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let e = nlp.evaluate(&w).unwrap();
        let (gscale, jscale) = (e.grad.amax().max(1e-8), e.ineq_jac.amax().max(1e-8));
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += 1e-6;
            wm[i] -= 1e-6;
            let (jp, _, gp) = nlp.values(&wp).unwrap();
            let (jm, _, gm) = nlp.values(&wm).unwrap();
            prop_assert!(((jp - jm) / 2e-6 - e.grad[i]).abs() <= 1e-5 * gscale);
            for r in 0..gp.len() {
                prop_assert!(((gp[r] - gm[r]) / 2e-6 - e.ineq_jac[(r, i)]).abs() <= 1e-5 * jscale, "row {} col {}", r, i);
            }
        }
    }

    #[test]
    fn kkt_points_satisfy_their_invariants(p in in_box()) {
        let spec = short_cstr(20);
        let cfg = SolverConfig::default();
        let nlp = build_nlp(&spec, &p).unwrap();
        let (kkt, status) = solve(&nlp, &spec.lqr_plan(&p).unwrap(), &cfg);
        if status.succeeded() {
            let (_, _, g) = nlp.values(&kkt.w_star).unwrap();
            prop_assert!(kkt.mu.iter().all(|m| *m >= 0.0));
            prop_assert!(g.iter().all(|v| *v <= cfg.tol_feas));
            prop_assert!(kkt.mu.iter().zip(&g).all(|(m, v)| (m * v).abs() <= cfg.tol_comp));
            prop_assert!(kkt_residual(&nlp, &kkt.w_star, &kkt.lambda, &kkt.mu, &cfg).unwrap() <= cfg.tol_kkt);

            let rec = reduced_hessian(&nlp, &kkt, 1, ReductionMode::Direct, &cfg).unwrap();
            let m = rec.matrix();
            prop_assert!((&m - m.transpose()).amax() <= 1e-10);
            prop_assert!(rec.hessian_norm >= 0.0);

            let w = kkt.w_star.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let b = estimate_bounds([(&nlp, w.as_slice(), kkt.lambda.as_slice(), kkt.mu.as_slice(), rec.hessian_norm)], 1, 0.01, 5, &mut rng).unwrap();
            prop_assert!(b.m_hs >= 0.0 && b.m_js >= 0.0 && b.epsilon >= 0.0 && b.rho >= 0.0 && b.radius >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weighted_loss_never_exceeds_squared_error(seed in any::<u64>(), scale in 0.1..4.0f64) {
        let (_, dataset) = small_dataset();
        let mut p = MlpPolicy::init(seed, &[2, 5, 5, 5, 1], InitScheme::XavierUniform, box_norm()).unwrap();
        let theta: Vec<f64> = p.parameters().iter().map(|v| v * scale).collect();
        p.set_parameters(&theta).unwrap();
        prop_assert!(loss_w(&p, dataset).unwrap() <= loss_mse(&p, dataset).unwrap());
    }
}

#[test]
fn generated_samples_keep_their_invariants() {
    let (spec, dataset) = small_dataset();
    dataset.check_invariants().unwrap();
    assert!(dataset.n_kept == dataset.samples.len() && dataset.n_kept <= dataset.n_attempted);
    let max_norm = dataset.samples.iter().map(|s| s.sens.hessian_norm).fold(0.0, f64::max);
    assert_eq!(dataset.gamma, max_norm);
    for s in &dataset.samples {
        assert!(s.u_star[0] >= spec.u_lo[0] && s.u_star[0] <= spec.u_hi[0], "{:e}", s.u_star[0]);
    }
    let v = dataset.verify(spec).unwrap();
    assert!(v.active_set_mismatches.is_empty());
    assert!(v.passes(&SolverConfig::default()));
}

#[test]
fn report_aggregates_recompute_from_rows() {
    let spec = short_cstr(20);
    let policy = MlpPolicy::constant(&[2, 3, 1], box_norm(), &[spec.u_e[0]]).unwrap();
    let cfg = EvalConfig {
        scenarios: 3,
        steps: 10,
        ..EvalConfig::default()
    };
    let eval = evaluate(
        &spec,
        &[Controller::Approx { name: "hold".into(), policy }],
        &SolverConfig::default(),
        &cfg,
    )
    .unwrap();
    assert_eq!(summarize(&eval.report.rows), eval.report.summary);
    assert!(eval.report.scenarios.iter().all(|s| spec.contains_state(&s.x0)));
}
