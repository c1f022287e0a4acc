//! Constitutive laws and problem setups: Brooks-Corey capillary pressure and
//! relative permeabilities, the unified coefficient framework for the
//! pressure/saturation system, and the two lens benchmark configurations.

use std::sync::Arc;

use crate::error::CoreError;
use crate::mesh::BoundarySide;
use crate::Point;

pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

pub fn constant_field(v: f64) -> ScalarField {
    Arc::new(move |_| v)
}

#[derive(Clone, Copy, Debug)]
pub struct FluidParams {
    /// Densities [kg/m^3].
    pub rho_w: f64,
    pub rho_n: f64,
    /// Viscosities [kg/(m s)].
    pub mu_w: f64,
    pub mu_n: f64,
    /// Gravity vector [m/s^2].
    pub gravity: [f64; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct RockParams {
    /// Porosity [-].
    pub porosity: f64,
    /// Residual saturations [-].
    pub s_wr: f64,
    pub s_nr: f64,
    /// Brooks-Corey exponent [-].
    pub theta: f64,
    /// Entry pressure [Pa].
    pub entry_pressure: f64,
    /// Absolute permeability tensor [m^2], symmetric positive definite.
    pub permeability: [[f64; 2]; 2],
}

impl RockParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        let k = &self.permeability;
        let spd = k[0][1] == k[1][0] && k[0][0] > 0.0 && k[0][0] * k[1][1] - k[0][1] * k[1][0] > 0.0;
        if !spd {
            return Err(CoreError::Config(
                "permeability tensor must be symmetric positive definite".into(),
            ));
        }
        if !(self.s_wr >= 0.0 && self.s_nr >= 0.0 && self.s_wr + self.s_nr < 1.0) {
            return Err(CoreError::Config(
                "residual saturations must satisfy 0 <= s_wr + s_nr < 1".into(),
            ));
        }
        if !(self.theta > 0.0) || self.entry_pressure < 0.0 || !(self.porosity > 0.0) {
            return Err(CoreError::Config(
                "rock parameters out of range (theta, p_d, porosity)".into(),
            ));
        }
        Ok(())
    }

    /// Normal permeability k = nu^T K nu.
    pub fn normal_permeability(&self, nu: [f64; 2]) -> f64 {
        let k = &self.permeability;
        nu[0] * (k[0][0] * nu[0] + k[0][1] * nu[1]) + nu[1] * (k[1][0] * nu[0] + k[1][1] * nu[1])
    }

    /// K * v.
    pub fn apply_permeability(&self, v: [f64; 2]) -> [f64; 2] {
        let k = &self.permeability;
        [
            k[0][0] * v[0] + k[0][1] * v[1],
            k[1][0] * v[0] + k[1][1] * v[1],
        ]
    }
}

/// Effective-saturation cut used by the cut-off stabilization.
pub const CUTOFF_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct CapillaryOutputs {
    /// Capillary pressure [Pa].
    pub p_c: f64,
    /// dp_c/ds_n [Pa].
    pub dp_c: f64,
    /// Mobilities [1/(Pa s)].
    pub lambda_n: f64,
    pub lambda_w: f64,
}

/// Saturation derivatives of the capillary quantities, used by the Newton
/// linearization of the fully implicit scheme.
#[derive(Clone, Copy, Debug, Default)]
pub struct CapillaryDerivs {
    pub d2p_c: f64,
    pub dlambda_n: f64,
    pub dlambda_w: f64,
}

/// Brooks-Corey laws as functions of the nonwetting saturation.
///
/// With `cutoff` both effective saturations are clamped to
/// [CUTOFF_EPS, 1 - CUTOFF_EPS] before the power laws; without it, a
/// non-positive effective wetting saturation is a domain error (the state the
/// scaling limiter exists to prevent).
pub fn brooks_corey(
    rock: &RockParams,
    fluids: &FluidParams,
    s_n: f64,
    cutoff: bool,
) -> Result<CapillaryOutputs, CoreError> {
    brooks_corey_full(rock, fluids, s_n, cutoff).map(|(c, _)| c)
}

pub fn brooks_corey_full(
    rock: &RockParams,
    fluids: &FluidParams,
    s_n: f64,
    cutoff: bool,
) -> Result<(CapillaryOutputs, CapillaryDerivs), CoreError> {
    let denom = 1.0 - rock.s_wr - rock.s_nr;
    let c = 1.0 / denom;
    let s_w = 1.0 - s_n;
    let mut s_we = (s_w - rock.s_wr) * c;
    let mut s_ne = (s_n - rock.s_nr) * c;
    // d s_we / d s_n and d s_ne / d s_n, zeroed where the cut-off clamps.
    let mut d_we = -c;
    let mut d_ne = c;
    if cutoff {
        if s_we <= CUTOFF_EPS || s_we >= 1.0 - CUTOFF_EPS {
            s_we = s_we.clamp(CUTOFF_EPS, 1.0 - CUTOFF_EPS);
            d_we = 0.0;
        }
        if s_ne <= CUTOFF_EPS || s_ne >= 1.0 - CUTOFF_EPS {
            s_ne = s_ne.clamp(CUTOFF_EPS, 1.0 - CUTOFF_EPS);
            d_ne = 0.0;
        }
    } else if s_we <= 0.0 {
        return Err(CoreError::Domain {
            element: usize::MAX,
            what: format!("effective wetting saturation {s_we:.3e} <= 0 at s_n = {s_n:.6}"),
        });
    }

    let theta = rock.theta;
    let a = (2.0 + 3.0 * theta) / theta;
    let b = (2.0 + theta) / theta;
    let swe_a1 = s_we.powf(a - 1.0);
    let swe_b1 = s_we.powf(b - 1.0);
    let k_rw = swe_a1 * s_we;
    let swe_b = swe_b1 * s_we;
    let k_rn = s_ne * s_ne * (1.0 - swe_b);
    let pc_pow = s_we.powf(-1.0 / theta);
    let p_c = rock.entry_pressure * pc_pow;
    let dp_c = rock.entry_pressure * (-1.0 / theta) * pc_pow / s_we * d_we;
    let d2p_c =
        rock.entry_pressure * (-1.0 / theta) * (-1.0 / theta - 1.0) * pc_pow / (s_we * s_we)
            * d_we
            * d_we;

    let dk_rw = a * swe_a1 * d_we;
    let dk_rn = 2.0 * s_ne * d_ne * (1.0 - swe_b) - s_ne * s_ne * b * swe_b1 * d_we;

    let out = CapillaryOutputs {
        p_c,
        dp_c,
        lambda_n: k_rn / fluids.mu_n,
        lambda_w: k_rw / fluids.mu_w,
    };
    let derivs = CapillaryDerivs {
        d2p_c,
        dlambda_n: dk_rn / fluids.mu_n,
        dlambda_w: dk_rw / fluids.mu_w,
    };
    Ok((out, derivs))
}

/// Which pressure/saturation formulation the coefficients represent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Wetting-phase pressure / nonwetting saturation.
    A,
    /// Mean pressure p_w + p_c/2 / nonwetting saturation.
    B,
}

/// Scalar coefficient sample of the unified framework at one point: the
/// tensors are `a_xy * K`, the gravity term is `g_p * K g`, and `P_g` is
/// `rho_n g`. Derivatives are with respect to the saturation argument.
#[derive(Clone, Copy, Debug, Default)]
pub struct CoeffSample {
    pub a_pp: f64,
    pub a_ps: f64,
    pub a_sp: f64,
    pub a_ss: f64,
    pub da_pp: f64,
    pub da_ps: f64,
    pub da_sp: f64,
    pub da_ss: f64,
    pub g_p: f64,
    pub dg_p: f64,
}

/// Constant coefficients for scheme-comparison tests: every scheme collapses
/// to the same linear system when the coefficients do not depend on s.
#[derive(Clone, Copy, Debug)]
pub struct FrozenCoeffs {
    pub a_pp: f64,
    pub a_ps: f64,
    pub a_sp: f64,
    pub a_ss: f64,
    pub g_p: f64,
}

#[derive(Clone, Debug)]
enum CoeffModel {
    TwoPhase(ModelKind),
    Frozen(FrozenCoeffs),
}

/// Evaluators A_pp, A_ps, A_sp, A_ss, G_p, P_g of the general framework,
/// bound to a model formulation and the cut-off flag.
#[derive(Clone, Debug)]
pub struct ModelCoefficients {
    kind: CoeffModel,
    pub cutoff: bool,
}

pub fn model_a_coefficients(setup: &ProblemSetup) -> ModelCoefficients {
    ModelCoefficients {
        kind: CoeffModel::TwoPhase(ModelKind::A),
        cutoff: setup.cutoff,
    }
}

pub fn model_b_coefficients(setup: &ProblemSetup) -> ModelCoefficients {
    ModelCoefficients {
        kind: CoeffModel::TwoPhase(ModelKind::B),
        cutoff: setup.cutoff,
    }
}

impl ModelCoefficients {
    pub fn for_kind(kind: ModelKind, cutoff: bool) -> ModelCoefficients {
        ModelCoefficients {
            kind: CoeffModel::TwoPhase(kind),
            cutoff,
        }
    }

    pub fn frozen(f: FrozenCoeffs) -> ModelCoefficients {
        ModelCoefficients {
            kind: CoeffModel::Frozen(f),
            cutoff: false,
        }
    }

    pub fn model_kind(&self) -> Option<ModelKind> {
        match self.kind {
            CoeffModel::TwoPhase(k) => Some(k),
            CoeffModel::Frozen(_) => None,
        }
    }

    pub fn eval(
        &self,
        rock: &RockParams,
        fluids: &FluidParams,
        s: f64,
    ) -> Result<CoeffSample, CoreError> {
        match &self.kind {
            CoeffModel::Frozen(f) => Ok(CoeffSample {
                a_pp: f.a_pp,
                a_ps: f.a_ps,
                a_sp: f.a_sp,
                a_ss: f.a_ss,
                g_p: f.g_p,
                ..CoeffSample::default()
            }),
            CoeffModel::TwoPhase(kind) => {
                let (cap, der) = brooks_corey_full(rock, fluids, s, self.cutoff)?;
                let (l_n, l_w) = (cap.lambda_n, cap.lambda_w);
                let (dl_n, dl_w) = (der.dlambda_n, der.dlambda_w);
                let g_p = -(fluids.rho_w * l_w + fluids.rho_n * l_n);
                let dg_p = -(fluids.rho_w * dl_w + fluids.rho_n * dl_n);
                Ok(match kind {
                    ModelKind::A => CoeffSample {
                        a_pp: l_n + l_w,
                        a_ps: l_n * cap.dp_c,
                        a_sp: l_n,
                        a_ss: l_n * cap.dp_c,
                        da_pp: dl_n + dl_w,
                        da_ps: dl_n * cap.dp_c + l_n * der.d2p_c,
                        da_sp: dl_n,
                        da_ss: dl_n * cap.dp_c + l_n * der.d2p_c,
                        g_p,
                        dg_p,
                    },
                    ModelKind::B => CoeffSample {
                        a_pp: l_n + l_w,
                        a_ps: 0.5 * (l_n - l_w) * cap.dp_c,
                        a_sp: l_n,
                        a_ss: 0.5 * l_n * cap.dp_c,
                        da_pp: dl_n + dl_w,
                        da_ps: 0.5 * ((dl_n - dl_w) * cap.dp_c + (l_n - l_w) * der.d2p_c),
                        da_sp: dl_n,
                        da_ss: 0.5 * (dl_n * cap.dp_c + l_n * der.d2p_c),
                        g_p,
                        dg_p,
                    },
                })
            }
        }
    }

    /// P_g = rho_n g.
    pub fn p_g(&self, fluids: &FluidParams) -> [f64; 2] {
        [
            fluids.rho_n * fluids.gravity[0],
            fluids.rho_n * fluids.gravity[1],
        ]
    }

    /// Penalty material factor for the pressure equation: the scalar part of
    /// A_pp at the evaluation saturation.
    pub fn delta_p(
        &self,
        rock: &RockParams,
        fluids: &FluidParams,
        s_eval: f64,
    ) -> Result<f64, CoreError> {
        Ok(self.eval(rock, fluids, s_eval)?.a_pp)
    }

    /// Penalty material factor for the saturation equation: the scalar part of
    /// A_ss at the evaluation saturation (carries the model-B 1/2).
    pub fn delta_s(
        &self,
        rock: &RockParams,
        fluids: &FluidParams,
        s_eval: f64,
    ) -> Result<f64, CoreError> {
        Ok(self.eval(rock, fluids, s_eval)?.a_ss)
    }

    /// Shift applied to pressure data when the model's pressure unknown is not
    /// p_w: model B uses p_w + p_c(s)/2.
    pub fn pressure_shift(
        &self,
        rock: &RockParams,
        fluids: &FluidParams,
        s: f64,
    ) -> Result<f64, CoreError> {
        match self.kind {
            CoeffModel::TwoPhase(ModelKind::B) => Ok(0.5
                * brooks_corey(rock, fluids, s, self.cutoff)?.p_c),
            _ => Ok(0.0),
        }
    }
}

/// Piecewise rock description; the lens indicator is sampled pointwise.
#[derive(Clone, Debug)]
pub enum RockField {
    Uniform(RockParams),
    Lens {
        lens: RockParams,
        exterior: RockParams,
        center: [f64; 2],
        half_width: [f64; 2],
    },
}

impl RockField {
    pub fn at(&self, x: Point) -> &RockParams {
        match self {
            RockField::Uniform(r) => r,
            RockField::Lens {
                lens,
                exterior,
                center,
                half_width,
            } => {
                if (x[0] - center[0]).abs() < half_width[0]
                    && (x[1] - center[1]).abs() < half_width[1]
                {
                    lens
                } else {
                    exterior
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        match self {
            RockField::Uniform(r) => r.validate(),
            RockField::Lens { lens, exterior, .. } => {
                lens.validate()?;
                exterior.validate()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryConfig {
    pub west: BoundaryKind,
    pub east: BoundaryKind,
    pub south: BoundaryKind,
    pub north: BoundaryKind,
}

impl BoundaryConfig {
    pub fn kind(&self, side: BoundarySide) -> BoundaryKind {
        match side {
            BoundarySide::West => self.west,
            BoundarySide::East => self.east,
            BoundarySide::South => self.south,
            BoundarySide::North => self.north,
        }
    }

    pub fn all_neumann() -> BoundaryConfig {
        BoundaryConfig {
            west: BoundaryKind::Neumann,
            east: BoundaryKind::Neumann,
            south: BoundaryKind::Neumann,
            north: BoundaryKind::Neumann,
        }
    }

    pub fn all_dirichlet() -> BoundaryConfig {
        BoundaryConfig {
            west: BoundaryKind::Dirichlet,
            east: BoundaryKind::Dirichlet,
            south: BoundaryKind::Dirichlet,
            north: BoundaryKind::Dirichlet,
        }
    }

    pub fn has_dirichlet(&self) -> bool {
        [self.west, self.east, self.south, self.north]
            .iter()
            .any(|k| *k == BoundaryKind::Dirichlet)
    }
}

/// Complete problem description: rock and fluid fields, boundary partition
/// with data, initial data, sources and final time.
#[derive(Clone)]
pub struct ProblemSetup {
    pub name: String,
    pub fluids: FluidParams,
    pub rock: RockField,
    pub boundary: BoundaryConfig,
    pub dirichlet_pressure: ScalarField,
    pub dirichlet_saturation: ScalarField,
    pub initial_pressure: ScalarField,
    pub initial_saturation: ScalarField,
    /// Prescribed normal phase fluxes v_alpha . nu on Neumann faces (inflow
    /// is negative), sampled pointwise.
    pub flux_n: ScalarField,
    pub flux_w: ScalarField,
    /// Framework sources q_p = q_w + q_n and q_s = q_n.
    pub source_p: ScalarField,
    pub source_s: ScalarField,
    pub final_time: f64,
    pub cutoff: bool,
    /// Gauge-fix the pressure when no Dirichlet boundary exists (test setups).
    pub pin_pressure: bool,
    pub domain_extent: (f64, f64),
    pub default_macro: (usize, usize),
}

impl std::fmt::Debug for ProblemSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSetup")
            .field("name", &self.name)
            .field("final_time", &self.final_time)
            .field("cutoff", &self.cutoff)
            .finish_non_exhaustive()
    }
}

impl ProblemSetup {
    pub fn rock_at(&self, x: Point) -> &RockParams {
        self.rock.at(x)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        self.rock.validate()?;
        if !self.boundary.has_dirichlet() && !self.pin_pressure {
            return Err(CoreError::Config(
                "the Dirichlet boundary must be nonempty (or pin_pressure set)".into(),
            ));
        }
        Ok(())
    }
}

fn lens_fluids() -> FluidParams {
    FluidParams {
        rho_w: 1000.0,
        mu_w: 1.0e-3,
        rho_n: 1460.0,
        mu_n: 9.0e-4,
        gravity: [0.0, -9.810],
    }
}

fn hydrostatic() -> ScalarField {
    Arc::new(|x| (0.65 - x[1]) * 9810.0)
}

fn lens_setup(name: &str, k_lens: [[f64; 2]; 2], k_ext: [[f64; 2]; 2], t_end: f64) -> ProblemSetup {
    let lens = RockParams {
        porosity: 0.39,
        s_wr: 0.10,
        s_nr: 0.0,
        theta: 2.0,
        entry_pressure: 5000.0,
        permeability: k_lens,
    };
    let exterior = RockParams {
        porosity: 0.40,
        s_wr: 0.12,
        s_nr: 0.0,
        theta: 2.70,
        entry_pressure: 755.0,
        permeability: k_ext,
    };
    ProblemSetup {
        name: name.into(),
        fluids: lens_fluids(),
        rock: RockField::Lens {
            lens,
            exterior,
            center: [0.45, 0.49],
            half_width: [0.11, 0.03],
        },
        boundary: BoundaryConfig {
            west: BoundaryKind::Dirichlet,
            east: BoundaryKind::Dirichlet,
            south: BoundaryKind::Neumann,
            north: BoundaryKind::Neumann,
        },
        dirichlet_pressure: hydrostatic(),
        dirichlet_saturation: constant_field(0.0),
        initial_pressure: hydrostatic(),
        initial_saturation: constant_field(0.0),
        flux_n: Arc::new(|x| {
            if (x[1] - 0.65).abs() < 1e-8 && (x[0] - 0.45).abs() < 0.06 {
                -5.137e-5
            } else {
                0.0
            }
        }),
        flux_w: constant_field(0.0),
        source_p: constant_field(0.0),
        source_s: constant_field(0.0),
        final_time: t_end,
        cutoff: false,
        pin_pressure: false,
        domain_extent: (0.9, 0.65),
        default_macro: (10, 6),
    }
}

/// DNAPL infiltration over an anisotropic low-permeability lens.
pub fn anisotropic_lens_setup() -> ProblemSetup {
    lens_setup(
        "anisotropic_lens",
        [[6.64e-14, 0.0], [0.0, 6.64e-14]],
        [[1.0e-10, -5.0e-11], [-5.0e-11, 1.0e-10]],
        800.0,
    )
}

/// Isotropic variant with a weaker lens; the flow stays mirror symmetric.
pub fn isotropic_weak_lens_setup() -> ProblemSetup {
    lens_setup(
        "isotropic_weak_lens",
        [[1.0e-12, 0.0], [0.0, 1.0e-12]],
        [[1.0e-10, 0.0], [0.0, 1.0e-10]],
        3200.0,
    )
}
