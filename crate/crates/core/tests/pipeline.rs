use kolmolab::degiorgi::{run_level_iteration, solve_exponents, LevelCertificate, LevelSpec};
use kolmolab::fd_solver::{
    check_max_principle, solve, BoundaryData, CoefficientSet, FdGrid, MaxPrincipleReport, ProductDomain,
    ScalarField,
};
use kolmolab::field::{Centering, GridField};
use kolmolab::group_conv::{solve_cauchy, KernelConvSpec};
use kolmolab::kernel::kernel_context;
use kolmolab::lie_group::{validate_structure, BlockSpec};
use kolmolab::sde_oracle::{density_error, exact_sample};

fn kinetic_domain() -> ProductDomain {
    ProductDomain::new(vec![-1.0], vec![1.0], vec![-1.0], vec![1.0], 0.4)
}

#[test]
fn solver_output_feeds_level_iteration_through_binary_io() {
    let s = validate_structure(&BlockSpec::kinetic(1)).unwrap();
    let mut c = CoefficientSet::identity(1);
    c.g = ScalarField::func(|x, _| 8.0 * (-8.0 * (x[0] * x[0] + x[1] * x[1])).exp());
    let sol = solve(&kinetic_domain(), &s, &c, &BoundaryData::uniform(0.5), &FdGrid::new(vec![16, 16], 0.02)).unwrap();
    assert!(sol.field.sup() > sol.m);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.bin");
    sol.field.write_binary(&path).unwrap();
    let back = GridField::read_binary(&path).unwrap();
    assert_eq!(back, sol.field);

    let bundle = solve_exponents(s.q() as u64, 0.1).unwrap();
    let nodes = sol.data_nodes();
    let a = run_level_iteration(&sol.field, sol.m, &bundle, &LevelSpec::default(), Some(&nodes)).unwrap();
    let b = run_level_iteration(&back, sol.m, &bundle, &LevelSpec::default(), Some(&nodes)).unwrap();
    assert_eq!(a, b);
    assert!(a.bound >= a.measured_sup);
    assert_eq!(a.measured_sup, sol.field.sup());

    let csv = dir.path().join("decay.csv");
    a.write_csv(&csv).unwrap();
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("subinterval,n,k_n,measure,energy\n"));
    let json = serde_json::to_string(&a).unwrap();
    let again: LevelCertificate = serde_json::from_str(&json).unwrap();
    assert_eq!(again, a);
}

#[test]
fn understated_data_bound_is_rejected() {
    let s = validate_structure(&BlockSpec::kinetic(1)).unwrap();
    let sol = solve(
        &kinetic_domain(),
        &s,
        &CoefficientSet::identity(1),
        &BoundaryData::uniform(2.0),
        &FdGrid::new(vec![8, 8], 0.05),
    )
    .unwrap();
    let bundle = solve_exponents(4, 0.1).unwrap();
    let nodes = sol.data_nodes();
    assert!(run_level_iteration(&sol.field, 1.0, &bundle, &LevelSpec::default(), Some(&nodes)).is_err());
}

#[test]
fn max_principle_report_round_trips() {
    let s = validate_structure(&BlockSpec::scalar_chain(2)).unwrap();
    let dom = ProductDomain::new(vec![-1.0], vec![1.0], vec![-1.0, -1.0], vec![1.0, 1.0], 0.2);
    let c = CoefficientSet::identity(1);
    let data = BoundaryData {
        gamma_p: ScalarField::func(|x, _| x[0] * x[1] - x[2]),
        gamma_k_plus: ScalarField::func(|x, t| (x[0] + x[1] + t).cos()),
    };
    let sol = solve(&dom, &s, &c, &data, &FdGrid::new(vec![8, 8, 8], 0.02)).unwrap();
    let r = check_max_principle(&sol, &c).unwrap();
    assert!(r.margin >= -1e-12, "{r:?}");
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"M\""));
    let again: MaxPrincipleReport = serde_json::from_str(&json).unwrap();
    assert_eq!(again, r);
}

#[test]
fn unit_source_accumulates_elapsed_time() {
    // K * 1 over a wide box equals t away from the box edges
    let ctx = kernel_context(&validate_structure(&BlockSpec::kinetic(1)).unwrap()).unwrap();
    let g = GridField::new(vec![-6.0, -6.0], vec![6.0, 6.0], (0.0, 0.4), vec![24, 24, 4], Centering::Cell, vec![1.0; 24 * 24 * 4])
        .unwrap();
    let u = solve_cauchy(&ctx, &g, &[], &KernelConvSpec::default()).unwrap();
    for t in [0.15, 0.35] {
        let v = u.sample(&[0.0, 0.0], t);
        assert!((v - t).abs() < 0.02 * t, "t = {t}: {v}");
    }
}

#[test]
fn exact_samples_match_kernel_density() {
    let ctx = kernel_context(&validate_structure(&BlockSpec::scalar_chain(2)).unwrap()).unwrap();
    let batch = exact_sample(&ctx, &[0.5, 0.0, -0.5], 0.7, 40_000, 3).unwrap();
    let r = density_error(&batch, &ctx, 12).unwrap();
    assert!(r.ks_pass(), "{r:?}");
    assert!(r.l1 < 0.1, "{r:?}");
}
