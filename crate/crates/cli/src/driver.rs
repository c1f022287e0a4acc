//! The batch run loop: project initial data, seed the mesh with the
//! initial-value adaptation, then step -> limit -> estimate -> adapt ->
//! transfer -> output until the final time.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use twophase_core::adapt::{
    compute_estimator, h_tol, mark_h, mark_p_diff, mark_p_frac, t_tol_from_initial, AdaptConfig,
    EstimatorField, PStrategy,
};
use twophase_core::dgspace::{orders_after_adapt, transfer_on_adapt, DgFunction, DgSpace};
use twophase_core::error::CoreError;
use twophase_core::forms::sigma_default;
use twophase_core::limiter::field_range_on_quadrature;
use twophase_core::mesh::Mesh;
use twophase_core::stepper::{project_initial_state, Stepper, TimeState};

use crate::config::RunConfig;
use crate::sample::{line_sample, LineSample, LENS_LINE_A, LENS_LINE_B};
use crate::vtk::write_vtk;

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub t: f64,
    pub dofs: usize,
    pub elements: usize,
    pub sum_eta2: f64,
    pub outer_iters: usize,
    pub newton_iters: usize,
    /// Post-limiter saturation range over all quadrature points.
    pub s_min: f64,
    pub s_max: f64,
}

#[derive(Clone, Debug)]
pub struct RunFailure {
    pub t: f64,
    pub scheme: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub state: TimeState,
    pub failure: Option<RunFailure>,
    pub max_leaf_count: usize,
    /// Line sample of the saturation at the final time.
    pub final_line: Option<LineSample>,
}

impl RunResult {
    pub fn dofs_at_step(&self, step: usize) -> Option<usize> {
        self.records.get(step).map(|r| r.dofs)
    }
}

struct OutputSink {
    dir: Option<PathBuf>,
    quiet: bool,
}

impl OutputSink {
    fn emit_snapshot(
        &self,
        step: usize,
        u: &DgFunction,
        est: Option<&EstimatorField>,
        line: Option<&LineSample>,
    ) -> Result<(), CoreError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let vtk_path = dir.join(format!("solution_{step:06}.vtk"));
        write_vtk(&vtk_path, u, est)
            .map_err(|e| CoreError::Config(format!("cannot write {}: {e}", vtk_path.display())))?;
        if let Some(line) = line {
            let path = dir.join(format!("line_{step:06}.csv"));
            write_line_csv(&path, line)?;
        }
        Ok(())
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn write_line_csv(path: &Path, line: &LineSample) -> Result<(), CoreError> {
    let mut w = std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CoreError::Config(format!("cannot write {}: {e}", path.display())))?;
    let io = |e: std::io::Error| CoreError::Config(format!("write {}: {e}", path.display()));
    writeln!(w, "sigma,x,y,s_n").map_err(io)?;
    for i in 0..line.sigma.len() {
        writeln!(
            w,
            "{:.9e},{:.9e},{:.9e},{:.9e}",
            line.sigma[i], line.points[i][0], line.points[i][1], line.values[i]
        )
        .map_err(io)?;
    }
    Ok(())
}

fn write_diagnostics(path: &Path, records: &[StepRecord]) -> Result<(), CoreError> {
    let mut w = std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CoreError::Config(format!("cannot write {}: {e}", path.display())))?;
    let io = |e: std::io::Error| CoreError::Config(format!("write {}: {e}", path.display()));
    writeln!(w, "t,dofs,elements,sum_eta2,outer_iters,newton_iters").map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{:.6},{},{},{:.9e},{},{}",
            r.t, r.dofs, r.elements, r.sum_eta2, r.outer_iters, r.newton_iters
        )
        .map_err(io)?;
    }
    Ok(())
}

fn sigma_of(config: &RunConfig, space: &DgSpace) -> f64 {
    config
        .form_config()
        .beta
        .unwrap_or_else(|| sigma_default(space.max_order()))
}

/// Execute a full run. Configuration errors are `Err`; a failed time step is
/// reported in `RunResult::failure` with everything computed so far.
pub fn run(config: &RunConfig) -> Result<RunResult, CoreError> {
    if config.threads > 0 {
        // First successful global pool wins; later calls are no-ops.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    let setup = config.build_setup()?;
    let model = config.build_model(&setup);
    let adapt_cfg: AdaptConfig = config.adapt_config()?;
    let form_cfg = config.form_config();
    let scheme_cfg = config.scheme_config();
    let tau = config.tau;
    let t_end = setup.final_time;
    if tau <= 0.0 {
        return Err(CoreError::Config("tau must be positive".into()));
    }
    if t_end > 0.0 && tau > t_end {
        return Err(CoreError::Config("tau must not exceed the final time".into()));
    }
    let n_steps = if t_end <= 0.0 {
        0
    } else {
        (t_end / tau - 1e-9).ceil() as usize
    };

    let sink = OutputSink {
        dir: config.output_dir.clone(),
        quiet: config.quiet,
    };
    if let Some(dir) = &sink.dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CoreError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }

    // Macro mesh, uniform top order, projected initial data.
    let (nx, ny) = config.macro_grid(&setup);
    let mesh = Arc::new(Mesh::build_macro(
        nx,
        ny,
        setup.domain_extent,
        adapt_cfg.max_level,
    )?);
    let mut space = Arc::new(DgSpace::uniform(mesh, adapt_cfg.max_poldeg, 2));
    let mut u = project_initial_state(&space, &setup, &model)?;

    // Initial adaptation: refine against the seed tolerance until stable,
    // re-projecting the analytic initial data on each pass.
    for _ in 0..=adapt_cfg.max_level {
        let sigma = sigma_of(config, &space);
        let est = compute_estimator(&setup, &model, &form_cfg, &u, &u, tau, sigma)?;
        let marks = mark_h(&est, &space.mesh, adapt_cfg.h_tol_init, adapt_cfg.coarsen_factor);
        let (new_mesh, report) = space.mesh.execute_marks(&marks);
        if !report.changed() {
            break;
        }
        let new_mesh = Arc::new(new_mesh);
        let orders = orders_after_adapt(&space, &new_mesh);
        space = Arc::new(DgSpace::new(new_mesh, orders, 2));
        u = project_initial_state(&space, &setup, &model)?;
    }

    let sigma = sigma_of(config, &space);
    let est0 = compute_estimator(&setup, &model, &form_cfg, &u, &u, tau, sigma)?;
    let t_tol = t_tol_from_initial(&est0, t_end.max(tau));

    let (s_lo, s_hi) = field_range_on_quadrature(&u, 1);
    let mut records = vec![StepRecord {
        t: 0.0,
        dofs: space.n_dofs(),
        elements: space.n_elements(),
        sum_eta2: est0.sum_eta_sq(),
        outer_iters: 0,
        newton_iters: 0,
        s_min: s_lo,
        s_max: s_hi,
    }];
    let mut max_leaf_count = space.n_elements();

    let line0 = line_sample(&u, 1, LENS_LINE_A, LENS_LINE_B, config.line_samples).ok();
    sink.emit_snapshot(0, &u, Some(&est0), line0.as_ref())?;

    let stepper = Stepper::new(&setup, &model, form_cfg, scheme_cfg);
    let mut state = TimeState {
        t: 0.0,
        step: 0,
        solution: u,
    };
    let mut failure = None;
    let snapshot_times = config.snapshot_times(&setup);
    let mut snapshot_done = vec![false; snapshot_times.len()];

    for i in 1..=n_steps {
        let prev = state.solution.clone();
        match stepper.advance(&state) {
            Err(e) => {
                let reason = e.to_string();
                sink.progress(&format!("step {i} failed: {reason}"));
                failure = Some(RunFailure {
                    t: state.t,
                    scheme: stepper.scheme.kind.name().into(),
                    reason,
                });
                break;
            }
            Ok((next, diag)) => {
                state = next;
                let sigma = sigma_of(config, &space);
                let est =
                    compute_estimator(&setup, &model, &form_cfg, &state.solution, &prev, tau, sigma)?;
                let (s_lo, s_hi) = field_range_on_quadrature(&state.solution, 1);
                records.push(StepRecord {
                    t: state.t,
                    dofs: space.n_dofs(),
                    elements: space.n_elements(),
                    sum_eta2: est.sum_eta_sq(),
                    outer_iters: diag.outer_iterations,
                    newton_iters: diag.newton_iterations,
                    s_min: s_lo,
                    s_max: s_hi,
                });

                // Output cadence: every k steps plus configured times.
                let mut want_output =
                    config.output_every > 0 && i % config.output_every == 0;
                for (done, &ts) in snapshot_done.iter_mut().zip(&snapshot_times) {
                    if !*done && state.t >= ts - 1e-9 {
                        *done = true;
                        want_output = true;
                    }
                }
                if want_output || i == n_steps {
                    let line = line_sample(
                        &state.solution,
                        1,
                        LENS_LINE_A,
                        LENS_LINE_B,
                        config.line_samples,
                    )
                    .ok();
                    sink.emit_snapshot(i, &state.solution, Some(&est), line.as_ref())?;
                    sink.progress(&format!(
                        "t = {:8.1}  elements = {:5}  dofs = {:6}  newton = {}",
                        state.t,
                        space.n_elements(),
                        space.n_dofs(),
                        diag.newton_iterations
                    ));
                }

                // h-adapt, then p-adapt, with solution transfer after each.
                if adapt_cfg.adapt_every > 0 && i % adapt_cfg.adapt_every == 0 && i < n_steps {
                    let tol = h_tol(t_tol, tau, space.n_elements());
                    let marks = mark_h(&est, &space.mesh, tol, adapt_cfg.coarsen_factor);
                    let (new_mesh, report) = space.mesh.execute_marks(&marks);
                    let mut cur = state.solution.clone();
                    let mut old = prev;
                    if report.changed() {
                        let new_mesh = Arc::new(new_mesh);
                        let orders = orders_after_adapt(&space, &new_mesh);
                        let new_space = Arc::new(DgSpace::new(new_mesh, orders, 2));
                        cur = transfer_on_adapt(&cur, &new_space);
                        old = transfer_on_adapt(&old, &new_space);
                        space = new_space;
                    }
                    if adapt_cfg.p_strategy != PStrategy::Off {
                        let sigma = sigma_of(config, &space);
                        let est_r =
                            compute_estimator(&setup, &model, &form_cfg, &cur, &old, tau, sigma)?;
                        let low = cur.project_to_lower_order(0);
                        let est_low =
                            compute_estimator(&setup, &model, &form_cfg, &low, &old, tau, sigma)?;
                        let eta_r: Vec<f64> =
                            (0..space.n_elements()).map(|e| est_r.eta(e)).collect();
                        let eta_low: Vec<f64> =
                            (0..space.n_elements()).map(|e| est_low.eta(e)).collect();
                        let new_orders = match adapt_cfg.p_strategy {
                            PStrategy::MarkPDiff { ptol } => {
                                let ptol = ptol.unwrap_or(0.01 * tol);
                                mark_p_diff(
                                    &eta_r,
                                    &eta_low,
                                    &space.orders,
                                    ptol,
                                    adapt_cfg.max_poldeg,
                                )
                            }
                            PStrategy::MarkPFrac { ptol, level_gate } => {
                                let levels: Vec<u8> = space
                                    .mesh
                                    .elements
                                    .iter()
                                    .map(|e| e.level())
                                    .collect();
                                mark_p_frac(
                                    &eta_r,
                                    &eta_low,
                                    &space.orders,
                                    &levels,
                                    ptol,
                                    adapt_cfg.max_poldeg,
                                    adapt_cfg.max_level,
                                    level_gate,
                                )
                            }
                            PStrategy::Off => unreachable!(),
                        };
                        if new_orders != space.orders {
                            let new_space =
                                Arc::new(DgSpace::new(space.mesh.clone(), new_orders, 2));
                            cur = transfer_on_adapt(&cur, &new_space);
                            space = new_space;
                        }
                    }
                    state.solution = cur;
                    max_leaf_count = max_leaf_count.max(space.n_elements());
                }
            }
        }
    }

    let final_line = line_sample(
        &state.solution,
        1,
        LENS_LINE_A,
        LENS_LINE_B,
        config.line_samples,
    )
    .ok();
    if let Some(dir) = &sink.dir {
        write_diagnostics(&dir.join("diagnostics.csv"), &records)?;
        if let Some(line) = &final_line {
            write_line_csv(&dir.join("line_final.csv"), line)?;
        }
        let summary = dir.join("summary.txt");
        let mut w = std::fs::File::create(&summary)
            .map_err(|e| CoreError::Config(format!("cannot write {}: {e}", summary.display())))?;
        let io = |e: std::io::Error| CoreError::Config(format!("write summary: {e}"));
        writeln!(w, "problem = {}", setup.name).map_err(io)?;
        writeln!(w, "scheme = {}", stepper.scheme.kind.name()).map_err(io)?;
        writeln!(w, "tau = {}", tau).map_err(io)?;
        writeln!(w, "steps = {}", records.len().saturating_sub(1)).map_err(io)?;
        writeln!(w, "final_t = {}", state.t).map_err(io)?;
        writeln!(w, "final_elements = {}", space.n_elements()).map_err(io)?;
        writeln!(w, "final_dofs = {}", space.n_dofs()).map_err(io)?;
        writeln!(w, "max_leaf_count = {}", max_leaf_count).map_err(io)?;
        writeln!(
            w,
            "status = {}",
            match &failure {
                None => "completed".to_string(),
                Some(f) => format!("failed at t = {} ({})", f.t, f.reason),
            }
        )
        .map_err(io)?;
    }

    Ok(RunResult {
        records,
        state,
        failure,
        max_leaf_count,
        final_line,
    })
}
