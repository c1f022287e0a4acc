use std::sync::Arc;
use twophase_core::dgspace::DgSpace;
use twophase_core::forms::*;
use twophase_core::mesh::Mesh;
use twophase_core::physics::*;
use twophase_core::solver::*;
use twophase_core::stepper::project_initial_state;

fn main() {
    let setup = anisotropic_lens_setup();
    let model = model_a_coefficients(&setup);
    let mesh = Arc::new(Mesh::build_macro(10, 6, setup.domain_extent, 3).unwrap());
    let mut space = Arc::new(DgSpace::uniform(mesh, 3, 2));
    let mut u = project_initial_state(&space, &setup, &model).unwrap();
    // initial adaptation passes, as in the driver
    for _ in 0..=3 {
        let est = twophase_core::adapt::compute_estimator(&setup, &model, &FormConfig::default(), &u, &u, 3.0, 12.0).unwrap();
        let marks = twophase_core::adapt::mark_h(&est, &space.mesh, 1e-16, 0.01);
        let (m2, report) = space.mesh.execute_marks(&marks);
        if !report.changed() { break; }
        let m2 = Arc::new(m2);
        let orders = twophase_core::dgspace::orders_after_adapt(&space, &m2);
        space = Arc::new(DgSpace::new(m2, orders, 2));
        u = project_initial_state(&space, &setup, &model).unwrap();
    }
    eprintln!("adapted: {} elements", space.n_elements());
    let input = AssemblyInput {
        u: &u,
        u_old: &u,
        s_bar: &u,
        which: WhichSystem::Coupled,
        jacobian_mode: JacobianMode::FullImplicit,
        tau: 3.0,
        alpha: 1.0,
    };
    let sys = assemble_system(&setup, &model, &FormConfig::default(), &input).unwrap();
    let n = sys.residual.len();
    eprintln!("n = {n}, |R| = {:.3e}", norm(&sys.residual));
    let b: Vec<f64> = sys.residual.iter().map(|v| -v).collect();
    // direct
    let t0 = std::time::Instant::now();
    let (xd, _) = linear_solve(&sys.jacobian, &b, &LinearConfig::default()).unwrap();
    eprintln!("direct: {:?} |x| = {:.3e}", t0.elapsed(), norm(&xd));
    // ILU-preconditioned GMRES
    let mut cfg = LinearConfig::default();
    cfg.direct_threshold = 0;
    cfg.rtol = 1e-9;
    let t0 = std::time::Instant::now();
    match linear_solve(&sys.jacobian, &b, &cfg) {
        Ok((x, stats)) => {
            let err: f64 = x.iter().zip(&xd).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
            eprintln!("gmres: {:?} iters = {} rel = {:.3e} err vs direct = {:.3e}",
                t0.elapsed(), stats.iterations, stats.relative_residual, err / norm(&xd));
        }
        Err(e) => eprintln!("gmres failed: {e}"),
    }
    // ILU as a DIRECT solver sanity check: pattern covers几乎 everything at 60 elements?
    let ilu = BlockIlu::factor(&sys.jacobian).unwrap();
    let mut z = vec![0.0; n];
    ilu.apply(&b, &mut z);
    let mut az = vec![0.0; n];
    sys.jacobian.matvec(&z, &mut az);
    let r: f64 = az.iter().zip(&b).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
    eprintln!("single ILU apply residual rel = {:.3e}", r / norm(&b));
}
