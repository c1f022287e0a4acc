//! Flat key=value run configuration with physics overrides mirroring the
//! benchmark parameter tables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use twophase_core::adapt::{AdaptConfig, PStrategy};
use twophase_core::error::CoreError;
use twophase_core::forms::FormConfig;
use twophase_core::limiter::LimiterConfig;
use twophase_core::physics::{
    anisotropic_lens_setup, isotropic_weak_lens_setup, model_a_coefficients,
    model_b_coefficients, ModelCoefficients, ModelKind, ProblemSetup, RockField,
};
use twophase_core::solver::{LinearConfig, NewtonConfig};
use twophase_core::stepper::{SchemeConfig, SchemeKind};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem: String,
    pub model: ModelKind,
    pub scheme: SchemeKind,
    pub tau: f64,
    /// Final time; `None` takes the preset's value.
    pub t_end: Option<f64>,
    pub macro_nx: Option<usize>,
    pub macro_ny: Option<usize>,
    pub max_level: u8,
    pub max_poldeg: u8,
    pub p_strategy: String,
    pub ptol: Option<f64>,
    pub cutoff: bool,
    pub limiter: bool,
    pub s_min: f64,
    pub s_max: f64,
    pub beta: Option<f64>,
    pub delta_eval_s: f64,
    pub alpha: f64,
    pub tol_iter: f64,
    pub max_outer: usize,
    pub limit_each_newton: bool,
    pub newton_atol: f64,
    pub newton_rtol: f64,
    pub newton_max_iter: usize,
    pub linear_rtol: f64,
    pub direct_threshold: usize,
    pub h_tol_init: f64,
    pub coarsen_factor: f64,
    pub adapt_every: usize,
    pub output_every: usize,
    /// Extra snapshot times; `None` takes the preset default.
    pub output_times: Option<Vec<f64>>,
    pub line_samples: usize,
    pub threads: usize,
    pub quiet: bool,
    pub output_dir: Option<PathBuf>,
    overrides: Vec<(String, f64)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: "anisotropic_lens".into(),
            model: ModelKind::A,
            scheme: SchemeKind::Implicit,
            tau: 3.0,
            t_end: None,
            macro_nx: None,
            macro_ny: None,
            max_level: 3,
            max_poldeg: 3,
            p_strategy: "markpdiff".into(),
            ptol: None,
            cutoff: false,
            limiter: true,
            s_min: 0.0,
            s_max: 1.0,
            beta: None,
            delta_eval_s: 0.5,
            alpha: 1.0,
            tol_iter: 3e-2,
            max_outer: 100,
            limit_each_newton: false,
            newton_atol: 1e-10,
            newton_rtol: 1e-8,
            newton_max_iter: 30,
            linear_rtol: 1e-9,
            direct_threshold: 20_000,
            h_tol_init: 1e-16,
            coarsen_factor: 0.01,
            adapt_every: 1,
            output_every: 50,
            output_times: None,
            line_samples: 512,
            threads: 1,
            quiet: false,
            output_dir: None,
            overrides: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one key=value pair (config file line or --override argument).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CoreError> {
        let bad = |what: &str| CoreError::Config(format!("invalid value '{value}' for {what}"));
        let f = || value.parse::<f64>().map_err(|_| bad(key));
        let u = || value.parse::<usize>().map_err(|_| bad(key));
        let b = || match value {
            "true" | "1" | "on" | "yes" => Ok(true),
            "false" | "0" | "off" | "no" => Ok(false),
            _ => Err(bad(key)),
        };
        match key {
            "problem" => self.problem = value.into(),
            "model" => {
                self.model = match value.to_ascii_uppercase().as_str() {
                    "A" => ModelKind::A,
                    "B" => ModelKind::B,
                    _ => return Err(bad("model (A or B)")),
                }
            }
            "scheme" => self.scheme = SchemeKind::parse(value)?,
            "tau" => self.tau = f()?,
            "T" | "t_end" => self.t_end = Some(f()?),
            "macro_nx" => self.macro_nx = Some(u()?),
            "macro_ny" => self.macro_ny = Some(u()?),
            "maxlevel" => self.max_level = u()? as u8,
            "maxpoldeg" => self.max_poldeg = u()? as u8,
            "p_strategy" => self.p_strategy = value.to_ascii_lowercase(),
            "ptol" => self.ptol = Some(f()?),
            "cutoff" => self.cutoff = b()?,
            "limiter" => self.limiter = b()?,
            "s_min" => self.s_min = f()?,
            "s_max" => self.s_max = f()?,
            "beta" => self.beta = Some(f()?),
            "delta_eval_s" => self.delta_eval_s = f()?,
            "alpha" => self.alpha = f()?,
            "tol_iter" => self.tol_iter = f()?,
            "max_outer" => self.max_outer = u()?,
            "limit_each_newton" => self.limit_each_newton = b()?,
            "newton_atol" => self.newton_atol = f()?,
            "newton_rtol" => self.newton_rtol = f()?,
            "newton_max_iter" => self.newton_max_iter = u()?,
            "linear_rtol" => self.linear_rtol = f()?,
            "direct_threshold" => self.direct_threshold = u()?,
            "h_tol_init" => self.h_tol_init = f()?,
            "coarsen_factor" => self.coarsen_factor = f()?,
            "adapt_every" => self.adapt_every = u()?,
            "output_every" => self.output_every = u()?,
            "output_times" => {
                let mut times = Vec::new();
                for part in value.split(',') {
                    times.push(part.trim().parse::<f64>().map_err(|_| bad(key))?);
                }
                self.output_times = Some(times);
            }
            "line_samples" => self.line_samples = u()?,
            "threads" => self.threads = u()?,
            "quiet" => self.quiet = b()?,
            _ if is_physics_key(key) => {
                // Validate the key now so bad overrides fail fast.
                let mut probe = anisotropic_lens_setup();
                let value = f()?;
                apply_physics_override(&mut probe, key, value)?;
                self.overrides.push((key.into(), value));
            }
            _ => {
                return Err(CoreError::Config(format!(
                    "unknown config key '{key}' (see README for the key list)"
                )))
            }
        }
        Ok(())
    }

    /// Preset problem setup with physics overrides applied.
    pub fn build_setup(&self) -> Result<ProblemSetup, CoreError> {
        let mut setup = match self.problem.as_str() {
            "anisotropic_lens" => anisotropic_lens_setup(),
            "isotropic_weak_lens" => isotropic_weak_lens_setup(),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown problem preset '{other}' \
                     (available: anisotropic_lens, isotropic_weak_lens)"
                )))
            }
        };
        setup.cutoff = self.cutoff;
        if let Some(t) = self.t_end {
            setup.final_time = t;
        }
        for (key, value) in &self.overrides {
            apply_physics_override(&mut setup, key, *value)?;
        }
        setup.validate()?;
        Ok(setup)
    }

    pub fn build_model(&self, setup: &ProblemSetup) -> ModelCoefficients {
        match self.model {
            ModelKind::A => model_a_coefficients(setup),
            ModelKind::B => model_b_coefficients(setup),
        }
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, CoreError> {
        let p_strategy = match self.p_strategy.as_str() {
            "off" | "none" => PStrategy::Off,
            "markpdiff" => PStrategy::MarkPDiff { ptol: self.ptol },
            "markpfrac" => PStrategy::MarkPFrac {
                ptol: self.ptol.unwrap_or(1.0),
                level_gate: true,
            },
            "markpfrac_plain" => PStrategy::MarkPFrac {
                ptol: self.ptol.unwrap_or(1.0),
                level_gate: false,
            },
            other => {
                return Err(CoreError::Config(format!(
                    "unknown p_strategy '{other}' \
                     (off, markpdiff, markpfrac, markpfrac_plain)"
                )))
            }
        };
        Ok(AdaptConfig {
            max_level: self.max_level,
            max_poldeg: self.max_poldeg,
            h_tol_init: self.h_tol_init,
            coarsen_factor: self.coarsen_factor,
            p_strategy,
            adapt_every: self.adapt_every,
        })
    }

    pub fn form_config(&self) -> FormConfig {
        FormConfig {
            beta: self.beta,
            delta_eval_s: self.delta_eval_s,
        }
    }

    pub fn scheme_config(&self) -> SchemeConfig {
        SchemeConfig {
            kind: self.scheme,
            tau: self.tau,
            alpha: self.alpha,
            tol_iter: self.tol_iter,
            max_outer: self.max_outer,
            newton: NewtonConfig {
                atol: self.newton_atol,
                rtol: self.newton_rtol,
                max_iter: self.newton_max_iter,
                line_search: false,
            },
            linear: LinearConfig {
                rtol: self.linear_rtol,
                direct_threshold: self.direct_threshold,
                ..LinearConfig::default()
            },
            limiter: if self.limiter {
                Some(LimiterConfig {
                    s_min: self.s_min,
                    s_max: self.s_max,
                })
            } else {
                None
            },
            limit_each_newton: self.limit_each_newton,
        }
    }

    pub fn macro_grid(&self, setup: &ProblemSetup) -> (usize, usize) {
        (
            self.macro_nx.unwrap_or(setup.default_macro.0),
            self.macro_ny.unwrap_or(setup.default_macro.1),
        )
    }

    /// Snapshot times: configured, or the preset cadence (quarters of T).
    pub fn snapshot_times(&self, setup: &ProblemSetup) -> Vec<f64> {
        self.output_times.clone().unwrap_or_else(|| {
            let t = setup.final_time;
            vec![0.25 * t, 0.5 * t, 0.75 * t, t]
        })
    }
}

fn is_physics_key(key: &str) -> bool {
    key.starts_with("rock.lens.")
        || key.starts_with("rock.exterior.")
        || key.starts_with("fluid.")
        || key == "J_n"
        || key == "gravity"
}

fn apply_physics_override(
    setup: &mut ProblemSetup,
    key: &str,
    value: f64,
) -> Result<(), CoreError> {
    if key == "J_n" {
        setup.flux_n = Arc::new(move |x: [f64; 2]| {
            if (x[1] - 0.65).abs() < 1e-8 && (x[0] - 0.45).abs() < 0.06 {
                value
            } else {
                0.0
            }
        });
        return Ok(());
    }
    if key == "gravity" {
        setup.fluids.gravity = [0.0, -value.abs()];
        return Ok(());
    }
    if let Some(field) = key.strip_prefix("fluid.") {
        match field {
            "rho_w" => setup.fluids.rho_w = value,
            "rho_n" => setup.fluids.rho_n = value,
            "mu_w" => setup.fluids.mu_w = value,
            "mu_n" => setup.fluids.mu_n = value,
            _ => return Err(CoreError::Config(format!("unknown fluid key '{key}'"))),
        }
        return Ok(());
    }
    let (which, field) = if let Some(rest) = key.strip_prefix("rock.lens.") {
        (true, rest)
    } else if let Some(rest) = key.strip_prefix("rock.exterior.") {
        (false, rest)
    } else {
        return Err(CoreError::Config(format!("unknown physics key '{key}'")));
    };
    let RockField::Lens {
        lens, exterior, ..
    } = &mut setup.rock
    else {
        return Err(CoreError::Config(
            "rock overrides require a lens problem preset".into(),
        ));
    };
    let rock = if which { lens } else { exterior };
    match field {
        "phi" => rock.porosity = value,
        "s_wr" => rock.s_wr = value,
        "s_nr" => rock.s_nr = value,
        "theta" => rock.theta = value,
        "p_d" => rock.entry_pressure = value,
        "kxx" => rock.permeability[0][0] = value,
        "kyy" => rock.permeability[1][1] = value,
        "kxy" => {
            rock.permeability[0][1] = value;
            rock.permeability[1][0] = value;
        }
        _ => {
            return Err(CoreError::Config(format!(
                "unknown rock key '{field}' (phi, s_wr, s_nr, theta, p_d, kxx, kxy, kyy)"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_the_lens_benchmark() {
        let cfg = RunConfig::default();
        let setup = cfg.build_setup().unwrap();
        assert_eq!(setup.final_time, 800.0);
        assert_eq!(cfg.macro_grid(&setup), (10, 6));
    }

    #[test]
    fn overrides_reach_the_rock_tables() {
        let mut cfg = RunConfig::default();
        cfg.set("rock.lens.kxx", "6e-14").unwrap();
        cfg.set("rock.lens.kyy", "6e-14").unwrap();
        cfg.set("fluid.mu_n", "1e-3").unwrap();
        let setup = cfg.build_setup().unwrap();
        assert_eq!(setup.rock_at([0.45, 0.49]).permeability[0][0], 6e-14);
        assert_eq!(setup.fluids.mu_n, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("scheme", "no_such_scheme").is_err());
        assert!(cfg.set("rock.lens.bogus", "1").is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = std::env::temp_dir().join("twophase-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nproblem = isotropic_weak_lens\nscheme = impes\ntau = 5 # inline\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.problem, "isotropic_weak_lens");
        assert_eq!(cfg.scheme, SchemeKind::Impes);
        assert_eq!(cfg.tau, 5.0);
    }
}
