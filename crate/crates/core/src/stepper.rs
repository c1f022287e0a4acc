//! The five time-advancement strategies: linear, fully implicit, iterative,
//! IMPES-iterative and classical IMPES, all built on the same assembled
//! forms. The iterative variants share the relative-change stopping
//! criterion on the saturation.

use std::sync::Arc;

use crate::dgspace::DgFunction;
use crate::error::CoreError;
use crate::forms::{
    assemble_system, gather_unknowns, scatter_unknowns, AssemblyInput, FormConfig, JacobianMode,
    WhichSystem,
};
use crate::limiter::{apply_scaling_limiter, LimiterConfig};
use crate::physics::{ModelCoefficients, ProblemSetup};
use crate::solver::{
    newton_solve, BlockMatrix, LinearConfig, NewtonConfig, NonlinearSystem,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    /// Frozen coefficients at the old saturation; one coupled linear solve.
    Linear,
    /// Backward Euler with Newton on the fully coupled system.
    Implicit,
    /// Outer fixed-point iteration on the coupled system.
    Iterative,
    /// Outer iteration solving pressure, then saturation.
    ImpesIterative,
    /// Classical IMPES: one pressure solve, one saturation solve.
    Impes,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Linear => "linear",
            SchemeKind::Implicit => "implicit",
            SchemeKind::Iterative => "iterative",
            SchemeKind::ImpesIterative => "impes_iterative",
            SchemeKind::Impes => "impes",
        }
    }

    pub fn parse(s: &str) -> Result<SchemeKind, CoreError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(SchemeKind::Linear),
            "implicit" => Ok(SchemeKind::Implicit),
            "iterative" => Ok(SchemeKind::Iterative),
            "impes_iterative" | "impes-iterative" | "impesiterative" => {
                Ok(SchemeKind::ImpesIterative)
            }
            "impes" => Ok(SchemeKind::Impes),
            other => Err(CoreError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    pub tau: f64,
    pub alpha: f64,
    pub tol_iter: f64,
    pub max_outer: usize,
    pub newton: NewtonConfig,
    pub linear: LinearConfig,
    pub limiter: Option<LimiterConfig>,
    /// Apply the limiter inside every Newton update instead of once after
    /// the solve.
    pub limit_each_newton: bool,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind, tau: f64) -> SchemeConfig {
        SchemeConfig {
            kind,
            tau,
            alpha: 1.0,
            tol_iter: 3e-2,
            max_outer: 100,
            newton: NewtonConfig::default(),
            linear: LinearConfig::default(),
            limiter: Some(LimiterConfig::default()),
            limit_each_newton: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TimeState {
    pub t: f64,
    pub step: usize,
    pub solution: DgFunction,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepDiagnostics {
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    pub linear_iterations: usize,
    pub limited_elements: usize,
    pub final_residual: f64,
}

/// Relative-change stopping criterion on the saturation field: stop when
/// ||s_new - s_prev|| < tol ||s_prev||; a vanishing previous norm requires a
/// vanishing difference.
pub fn stopping_criterion(s_new: &DgFunction, s_prev: &DgFunction, tol_iter: f64) -> bool {
    let diff = s_new.l2_distance(s_prev, 1);
    let prev = s_prev.l2_norm(1);
    if prev == 0.0 {
        diff == 0.0
    } else {
        diff < tol_iter * prev
    }
}

struct SystemAdapter<'a> {
    setup: &'a ProblemSetup,
    model: &'a ModelCoefficients,
    config: &'a FormConfig,
    u_old: &'a DgFunction,
    s_bar: &'a DgFunction,
    which: WhichSystem,
    mode: JacobianMode,
    tau: f64,
    alpha: f64,
    work: DgFunction,
}

impl NonlinearSystem for SystemAdapter<'_> {
    fn dim(&self) -> usize {
        gather_unknowns(&self.work, self.which).len()
    }

    fn residual_and_jacobian(
        &mut self,
        u: &[f64],
    ) -> Result<(Vec<f64>, BlockMatrix), CoreError> {
        scatter_unknowns(&mut self.work, self.which, u);
        let s_bar = if self.mode == JacobianMode::FullImplicit {
            &self.work
        } else {
            self.s_bar
        };
        let input = AssemblyInput {
            u: &self.work,
            u_old: self.u_old,
            s_bar,
            which: self.which,
            jacobian_mode: self.mode,
            tau: self.tau,
            alpha: self.alpha,
        };
        let sys = assemble_system(self.setup, self.model, self.config, &input)?;
        Ok((sys.residual, sys.jacobian))
    }
}

pub struct Stepper<'a> {
    pub setup: &'a ProblemSetup,
    pub model: &'a ModelCoefficients,
    pub form_config: FormConfig,
    pub scheme: SchemeConfig,
}

impl<'a> Stepper<'a> {
    pub fn new(
        setup: &'a ProblemSetup,
        model: &'a ModelCoefficients,
        form_config: FormConfig,
        scheme: SchemeConfig,
    ) -> Stepper<'a> {
        Stepper {
            setup,
            model,
            form_config,
            scheme,
        }
    }

    fn step_failure(&self, t: f64, reason: String) -> CoreError {
        CoreError::StepFailure {
            t,
            scheme: self.scheme.kind.name().into(),
            reason,
        }
    }

    fn limit(&self, u: &mut DgFunction, diag: &mut StepDiagnostics) {
        if let Some(cfg) = &self.scheme.limiter {
            let report = apply_scaling_limiter(u, 1, cfg);
            diag.limited_elements += report.limited;
        }
    }

    /// One coupled solve with a frozen intermediate saturation.
    fn coupled_frozen_solve(
        &self,
        start: &DgFunction,
        u_old: &DgFunction,
        s_bar: &DgFunction,
        t: f64,
        diag: &mut StepDiagnostics,
    ) -> Result<DgFunction, CoreError> {
        let mut sys = SystemAdapter {
            setup: self.setup,
            model: self.model,
            config: &self.form_config,
            u_old,
            s_bar,
            which: WhichSystem::Coupled,
            mode: JacobianMode::FrozenIntermediate,
            tau: self.scheme.tau,
            alpha: self.scheme.alpha,
            work: start.clone(),
        };
        let x0 = gather_unknowns(start, WhichSystem::Coupled);
        let (x, stats) = newton_solve(&mut sys, &x0, &self.scheme.newton, &self.scheme.linear)
            .map_err(|f| self.step_failure(t, f.reason.clone()))?;
        diag.newton_iterations += stats.iterations;
        diag.linear_iterations += stats.linear_iterations;
        diag.final_residual = stats.final_residual;
        let mut out = start.clone();
        scatter_unknowns(&mut out, WhichSystem::Coupled, &x);
        Ok(out)
    }

    fn single_field_solve(
        &self,
        which: WhichSystem,
        state: &DgFunction,
        u_old: &DgFunction,
        s_bar: &DgFunction,
        t: f64,
        diag: &mut StepDiagnostics,
    ) -> Result<DgFunction, CoreError> {
        let mut sys = SystemAdapter {
            setup: self.setup,
            model: self.model,
            config: &self.form_config,
            u_old,
            s_bar,
            which,
            mode: JacobianMode::FrozenIntermediate,
            tau: self.scheme.tau,
            alpha: self.scheme.alpha,
            work: state.clone(),
        };
        let x0 = gather_unknowns(state, which);
        let (x, stats) = newton_solve(&mut sys, &x0, &self.scheme.newton, &self.scheme.linear)
            .map_err(|f| self.step_failure(t, f.reason.clone()))?;
        diag.newton_iterations += stats.iterations;
        diag.linear_iterations += stats.linear_iterations;
        diag.final_residual = stats.final_residual;
        let mut out = state.clone();
        scatter_unknowns(&mut out, which, &x);
        Ok(out)
    }

    fn advance_implicit(
        &self,
        state: &TimeState,
        diag: &mut StepDiagnostics,
    ) -> Result<DgFunction, CoreError> {
        let u_old = &state.solution;
        if !self.scheme.limit_each_newton {
            let mut sys = SystemAdapter {
                setup: self.setup,
                model: self.model,
                config: &self.form_config,
                u_old,
                s_bar: u_old,
                which: WhichSystem::Coupled,
                mode: JacobianMode::FullImplicit,
                tau: self.scheme.tau,
                alpha: self.scheme.alpha,
                work: u_old.clone(),
            };
            let x0 = gather_unknowns(u_old, WhichSystem::Coupled);
            let (x, stats) =
                newton_solve(&mut sys, &x0, &self.scheme.newton, &self.scheme.linear)
                    .map_err(|f| self.step_failure(state.t, f.reason.clone()))?;
            diag.newton_iterations += stats.iterations;
            diag.linear_iterations += stats.linear_iterations;
            diag.final_residual = stats.final_residual;
            let mut out = u_old.clone();
            scatter_unknowns(&mut out, WhichSystem::Coupled, &x);
            self.limit(&mut out, diag);
            return Ok(out);
        }

        // Manual Newton loop with the limiter applied to every iterate.
        let mut u = u_old.clone();
        let mut initial_norm = None;
        for it in 0..=self.scheme.newton.max_iter {
            let input = AssemblyInput {
                u: &u,
                u_old,
                s_bar: &u,
                which: WhichSystem::Coupled,
                jacobian_mode: JacobianMode::FullImplicit,
                tau: self.scheme.tau,
                alpha: self.scheme.alpha,
            };
            let sys = assemble_system(self.setup, self.model, &self.form_config, &input)
                .map_err(|e| self.step_failure(state.t, e.to_string()))?;
            let rnorm = crate::solver::norm(&sys.residual);
            diag.final_residual = rnorm;
            let r0 = *initial_norm.get_or_insert(rnorm);
            if rnorm <= self.scheme.newton.atol || rnorm <= self.scheme.newton.rtol * r0 {
                return Ok(u);
            }
            if it == self.scheme.newton.max_iter {
                break;
            }
            let neg: Vec<f64> = sys.residual.iter().map(|v| -v).collect();
            let (dx, lin) = crate::solver::linear_solve(&sys.jacobian, &neg, &self.scheme.linear)
                .map_err(|e| self.step_failure(state.t, e.to_string()))?;
            diag.linear_iterations += lin.iterations;
            diag.newton_iterations += 1;
            let mut x = gather_unknowns(&u, WhichSystem::Coupled);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            scatter_unknowns(&mut u, WhichSystem::Coupled, &x);
            self.limit(&mut u, diag);
        }
        Err(self.step_failure(
            state.t,
            format!(
                "Newton with per-iterate limiting did not converge within {} iterations",
                self.scheme.newton.max_iter
            ),
        ))
    }

    fn advance_outer_coupled(
        &self,
        state: &TimeState,
        diag: &mut StepDiagnostics,
    ) -> Result<DgFunction, CoreError> {
        let u_old = &state.solution;
        let mut iterate = u_old.clone();
        for _ in 0..self.scheme.max_outer {
            diag.outer_iterations += 1;
            let s_bar = iterate.clone();
            let mut next = self.coupled_frozen_solve(&iterate, u_old, &s_bar, state.t, diag)?;
            self.limit(&mut next, diag);
            let stop = stopping_criterion(&next, &s_bar, self.scheme.tol_iter);
            iterate = next;
            if stop {
                return Ok(iterate);
            }
        }
        Err(self.step_failure(
            state.t,
            format!(
                "outer iteration cap {} reached without meeting tol_iter",
                self.scheme.max_outer
            ),
        ))
    }

    fn advance_impes_like(
        &self,
        state: &TimeState,
        max_outer: usize,
        check_stop: bool,
        diag: &mut StepDiagnostics,
    ) -> Result<DgFunction, CoreError> {
        let u_old = &state.solution;
        let mut iterate = u_old.clone();
        for _ in 0..max_outer {
            diag.outer_iterations += 1;
            let s_bar = iterate.clone();
            // Pressure solve with the saturation frozen in both slots.
            let with_p = self.single_field_solve(
                WhichSystem::PressureOnly,
                &iterate,
                u_old,
                &s_bar,
                state.t,
                diag,
            )?;
            // Saturation solve using the new pressure.
            let mut next = self.single_field_solve(
                WhichSystem::SaturationOnly,
                &with_p,
                u_old,
                &s_bar,
                state.t,
                diag,
            )?;
            self.limit(&mut next, diag);
            let stop = check_stop && stopping_criterion(&next, &s_bar, self.scheme.tol_iter);
            iterate = next;
            if stop {
                return Ok(iterate);
            }
        }
        if check_stop {
            Err(self.step_failure(
                state.t,
                format!(
                    "outer iteration cap {} reached without meeting tol_iter",
                    self.scheme.max_outer
                ),
            ))
        } else {
            Ok(iterate)
        }
    }

    /// Advance one time step; returns the new state and solver diagnostics.
    pub fn advance(&self, state: &TimeState) -> Result<(TimeState, StepDiagnostics), CoreError> {
        let mut diag = StepDiagnostics::default();
        let u_old = &state.solution;
        let next = match self.scheme.kind {
            SchemeKind::Linear => {
                let mut u = self.coupled_frozen_solve(u_old, u_old, u_old, state.t, &mut diag)?;
                self.limit(&mut u, &mut diag);
                u
            }
            SchemeKind::Implicit => self.advance_implicit(state, &mut diag)?,
            SchemeKind::Iterative => self.advance_outer_coupled(state, &mut diag)?,
            SchemeKind::ImpesIterative => {
                self.advance_impes_like(state, self.scheme.max_outer, true, &mut diag)?
            }
            SchemeKind::Impes => self.advance_impes_like(state, 1, false, &mut diag)?,
        };
        if next.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(self.step_failure(state.t, "non-finite solution".into()));
        }
        Ok((
            TimeState {
                t: state.t + self.scheme.tau,
                step: state.step + 1,
                solution: next,
            },
            diag,
        ))
    }
}

/// Project the initial data of a setup into a space, applying the model's
/// pressure shift (model B solves for p_w + p_c/2).
pub fn project_initial_state(
    space: &Arc<crate::dgspace::DgSpace>,
    setup: &ProblemSetup,
    model: &ModelCoefficients,
) -> Result<DgFunction, CoreError> {
    let mut u = DgFunction::zeros(space.clone());
    let fluids = setup.fluids;
    let rock = setup.rock.clone();
    let p0 = setup.initial_pressure.clone();
    let s0 = setup.initial_saturation.clone();
    let model_c = model.clone();
    u.project_analytic(1, |x| s0(x));
    u.project_analytic(0, move |x| {
        p0(x)
            + model_c
                .pressure_shift(rock.at(x), &fluids, s0(x))
                .unwrap_or(0.0)
    });
    if u.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(CoreError::Config(
            "initial data projected to non-finite values".into(),
        ));
    }
    Ok(u)
}
