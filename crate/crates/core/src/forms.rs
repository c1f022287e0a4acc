//! Assembly of the interior-penalty DG residual forms and their exact
//! directional derivatives.
//!
//! The pressure residual is F_p = B_p - C_p + S_p with bulk, weighted-average
//! consistency and penalty parts; the saturation residual is the
//! time-discrete equation  int Phi (s - s_old) phi
//! + tau [ (1-alpha) F_s(u_old; s_old) + alpha F_s(u; s_bar) ].
//! Dirichlet data enters weakly through penalty and one-sided consistency
//! terms; Neumann faces carry the prescribed fluxes instead of the
//! consistency flux.

use std::sync::Arc;

use rayon::prelude::*;

use crate::basis;
use crate::dgspace::{DgFunction, DgSpace};
use crate::error::CoreError;
use crate::limiter::face_point;
use crate::mesh::{Face, FaceNeighbor, Mesh};
use crate::physics::{
    BoundaryKind, FluidParams, ModelCoefficients, ProblemSetup, RockParams,
};
use crate::quadrature::QuadratureRule;
use crate::solver::{BlockLayout, BlockMatrix};

/// Penalty scaling and the saturation at which the penalty material factors
/// are evaluated.
#[derive(Clone, Copy, Debug)]
pub struct FormConfig {
    /// Penalty prefactor sigma; `None` selects r_max (r_max + 1).
    pub beta: Option<f64>,
    /// Evaluation point of the delta factors.
    pub delta_eval_s: f64,
}

impl Default for FormConfig {
    fn default() -> Self {
        FormConfig {
            beta: None,
            delta_eval_s: 0.5,
        }
    }
}

/// sigma = r (r + 1) for the highest polynomial degree in the space.
pub fn sigma_default(r_max: u8) -> f64 {
    let r = r_max as f64;
    r * (r + 1.0)
}

/// Which unknowns the assembled system solves for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WhichSystem {
    Coupled,
    /// F_p with the saturation slot read from the intermediate function.
    PressureOnly,
    /// Saturation equation with the pressure slot read from `u`.
    SaturationOnly,
}

impl WhichSystem {
    fn pressure_active(self) -> bool {
        !matches!(self, WhichSystem::SaturationOnly)
    }
    fn saturation_active(self) -> bool {
        !matches!(self, WhichSystem::PressureOnly)
    }
    fn n_active(self) -> usize {
        match self {
            WhichSystem::Coupled => 2,
            _ => 1,
        }
    }
}

/// Whether the Jacobian includes the dependence of the coefficients on the
/// intermediate saturation (s_bar = s, fully implicit) or holds it frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianMode {
    FrozenIntermediate,
    FullImplicit,
}

pub struct AssemblyInput<'a> {
    pub u: &'a DgFunction,
    pub u_old: &'a DgFunction,
    pub s_bar: &'a DgFunction,
    pub which: WhichSystem,
    pub jacobian_mode: JacobianMode,
    pub tau: f64,
    pub alpha: f64,
}

pub struct AssembledSystem {
    pub residual: Vec<f64>,
    pub jacobian: BlockMatrix,
}

/// Permeability-weighted face weights (omega_minus, omega_plus).
pub fn face_weights(k_minus: f64, k_plus: f64) -> Result<(f64, f64), CoreError> {
    let sum = k_minus + k_plus;
    if !(sum > 0.0) {
        return Err(CoreError::DegenerateFace(format!(
            "normal permeabilities sum to {sum}"
        )));
    }
    Ok((k_plus / sum, k_minus / sum))
}

/// Weighted average of interior traces; boundary faces use the inside trace.
pub fn weighted_average(
    q_minus: f64,
    q_plus: Option<f64>,
    k_minus: f64,
    k_plus: f64,
) -> Result<f64, CoreError> {
    match q_plus {
        None => Ok(q_minus),
        Some(qp) => {
            let (wm, wp) = face_weights(k_minus, k_plus)?;
            Ok(wm * q_minus + wp * qp)
        }
    }
}

/// Penalty factors gamma_e^p, gamma_e^s from the material deltas, the
/// harmonic normal permeability and the face/element geometry.
#[allow(clippy::too_many_arguments)]
pub fn penalty_factors_general(
    rock_minus: &RockParams,
    rock_plus: Option<&RockParams>,
    area_minus: f64,
    area_plus: Option<f64>,
    measure: f64,
    normal: [f64; 2],
    model: &ModelCoefficients,
    fluids: &FluidParams,
    delta_eval_s: f64,
) -> Result<(f64, f64), CoreError> {
    let k_minus = rock_minus.normal_permeability(normal);
    let dp_minus = model.delta_p(rock_minus, fluids, delta_eval_s)?;
    let ds_minus = model.delta_s(rock_minus, fluids, delta_eval_s)?;
    match rock_plus {
        None => {
            let geo = measure / area_minus;
            Ok((dp_minus * k_minus * geo, ds_minus * k_minus * geo))
        }
        Some(rp) => {
            let k_plus = rp.normal_permeability(normal);
            if !(k_minus + k_plus > 0.0) {
                return Err(CoreError::DegenerateFace(
                    "vanishing normal permeability across the face".into(),
                ));
            }
            let harm = 2.0 * k_plus * k_minus / (k_plus + k_minus);
            let geo = measure / area_minus.min(area_plus.unwrap_or(area_minus));
            let dp_plus = model.delta_p(rp, fluids, delta_eval_s)?;
            let ds_plus = model.delta_s(rp, fluids, delta_eval_s)?;
            Ok((
                dp_minus.max(dp_plus) * harm * geo,
                ds_minus.max(ds_plus) * harm * geo,
            ))
        }
    }
}

/// Face penalty factors with the rock sampled pointwise at the face midpoint.
pub fn penalty_factors(
    face: &Face,
    mesh: &Mesh,
    setup: &ProblemSetup,
    model: &ModelCoefficients,
    config: &FormConfig,
) -> Result<(f64, f64), CoreError> {
    let rock = setup.rock_at(face.midpoint);
    let area_minus = mesh.element(face.inside).area;
    match face.neighbor {
        FaceNeighbor::Boundary(_) => penalty_factors_general(
            rock,
            None,
            area_minus,
            None,
            face.measure,
            face.normal,
            model,
            &setup.fluids,
            config.delta_eval_s,
        ),
        FaceNeighbor::Interior(nid) => penalty_factors_general(
            rock,
            Some(rock),
            area_minus,
            Some(mesh.element(nid).area),
            face.measure,
            face.normal,
            model,
            &setup.fluids,
            config.delta_eval_s,
        ),
    }
}

/// Unknown block layout of the selected system.
pub fn unknown_layout(space: &DgSpace, which: WhichSystem) -> BlockLayout {
    let nf = which.n_active();
    BlockLayout::new(
        (0..space.n_elements())
            .map(|e| nf * space.block_size(e))
            .collect(),
    )
}

pub fn gather_unknowns(u: &DgFunction, which: WhichSystem) -> Vec<f64> {
    let space = &u.space;
    let mut out = Vec::new();
    for e in 0..space.n_elements() {
        if which.pressure_active() {
            out.extend_from_slice(u.field_block(e, 0));
        }
        if which.saturation_active() {
            out.extend_from_slice(u.field_block(e, 1));
        }
    }
    out
}

pub fn scatter_unknowns(u: &mut DgFunction, which: WhichSystem, x: &[f64]) {
    let space = u.space.clone();
    let mut k = 0;
    for e in 0..space.n_elements() {
        let bs = space.block_size(e);
        if which.pressure_active() {
            u.field_block_mut(e, 0).copy_from_slice(&x[k..k + bs]);
            k += bs;
        }
        if which.saturation_active() {
            u.field_block_mut(e, 1).copy_from_slice(&x[k..k + bs]);
            k += bs;
        }
    }
    assert_eq!(k, x.len());
}

pub fn element_neighbors(mesh: &Mesh) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); mesh.n_elements()];
    for f in &mesh.faces {
        if let FaceNeighbor::Interior(nid) = f.neighbor {
            out[f.inside].push(nid);
            out[nid].push(f.inside);
        }
    }
    out
}

// Small dense helpers.

#[inline]
fn mat2vec(k: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        k[0][0] * v[0] + k[0][1] * v[1],
        k[1][0] * v[0] + k[1][1] * v[1],
    ]
}

#[inline]
fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn eval_value(block: &[f64], vals: &[f64]) -> f64 {
    block.iter().zip(vals).map(|(c, v)| c * v).sum()
}

#[inline]
fn eval_grad(block: &[f64], grads: &[[f64; 2]]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for (c, gr) in block.iter().zip(grads) {
        g[0] += c * gr[0];
        g[1] += c * gr[1];
    }
    g
}

/// Basis values and physical gradients of one element at one point.
struct BasisPoint {
    vals: Vec<f64>,
    grads: Vec<[f64; 2]>,
}

impl BasisPoint {
    fn new(order: u8) -> BasisPoint {
        let n = basis::block_size(order);
        BasisPoint {
            vals: vec![0.0; n],
            grads: vec![[0.0; 2]; n],
        }
    }

    fn eval(&mut self, order: u8, xi: [f64; 2], scale: [f64; 2]) {
        basis::tensor_values_grads(order, xi, &mut self.vals, &mut self.grads);
        for g in self.grads.iter_mut() {
            g[0] *= scale[0];
            g[1] *= scale[1];
        }
    }
}

fn domain_err(e: CoreError, element: usize) -> CoreError {
    match e {
        CoreError::Domain { what, .. } => CoreError::Domain { element, what },
        other => other,
    }
}

struct FaceLocal {
    res_m: Vec<f64>,
    res_p: Vec<f64>,
    jmm: Vec<f64>,
    jmp: Vec<f64>,
    jpm: Vec<f64>,
    jpp: Vec<f64>,
}

/// Assemble the residual and Jacobian of the selected system.
pub fn assemble_system(
    setup: &ProblemSetup,
    model: &ModelCoefficients,
    config: &FormConfig,
    input: &AssemblyInput,
) -> Result<AssembledSystem, CoreError> {
    let space = input.u.space.clone();
    assert!(space.n_fields == 2, "two-field space expected");
    assert!(input.u_old.space.same_layout(&space));
    assert!(input.s_bar.space.same_layout(&space));
    let mesh = space.mesh.clone();
    let sigma = config.beta.unwrap_or_else(|| sigma_default(space.max_order()));

    let layout = Arc::new(unknown_layout(&space, input.which));
    let neighbors = element_neighbors(&mesh);
    let mut matrix = BlockMatrix::new(layout.clone(), &neighbors);
    let mut residual = vec![0.0; layout.n];

    // Element volumes: embarrassingly parallel, ordered scatter afterwards.
    let elem_locals: Result<Vec<(Vec<f64>, Vec<f64>)>, CoreError> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| assemble_element(e, setup, model, input))
        .collect();
    for (e, (res, jac)) in elem_locals?.into_iter().enumerate() {
        let o = layout.offsets[e];
        for (i, v) in res.into_iter().enumerate() {
            residual[o + i] += v;
        }
        matrix.add_block(e, e, &jac);
    }

    let face_locals: Result<Vec<FaceLocal>, CoreError> = (0..mesh.faces.len())
        .into_par_iter()
        .map(|f| assemble_face(f, setup, model, config, input, sigma))
        .collect();
    for (f, local) in face_locals?.into_iter().enumerate() {
        let face = &mesh.faces[f];
        let em = face.inside;
        let om = layout.offsets[em];
        for (i, v) in local.res_m.iter().enumerate() {
            residual[om + i] += v;
        }
        matrix.add_block(em, em, &local.jmm);
        if let FaceNeighbor::Interior(ep) = face.neighbor {
            let op = layout.offsets[ep];
            for (i, v) in local.res_p.iter().enumerate() {
                residual[op + i] += v;
            }
            matrix.add_block(em, ep, &local.jmp);
            matrix.add_block(ep, em, &local.jpm);
            matrix.add_block(ep, ep, &local.jpp);
        }
    }

    // Gauge fix for pure-Neumann pressure problems: pin the mean pressure
    // mode of element 0 to its previous-time value. Only the pressure row
    // changes, so the discrete mass balance of the saturation rows is
    // untouched.
    if setup.pin_pressure && !setup.boundary.has_dirichlet() && input.which.pressure_active() {
        let row = layout.offsets[0];
        residual[row] = input.u.field_block(0, 0)[0] - input.u_old.field_block(0, 0)[0];
        matrix.set_unit_row(0, 0);
    }

    if residual.iter().any(|v| !v.is_finite()) {
        let bad = residual.iter().position(|v| !v.is_finite()).unwrap();
        let e = layout
            .offsets
            .partition_point(|&o| o <= bad)
            .saturating_sub(1);
        return Err(CoreError::Assembly { element: e });
    }

    Ok(AssembledSystem {
        residual,
        jacobian: matrix,
    })
}

fn assemble_element(
    e: usize,
    setup: &ProblemSetup,
    model: &ModelCoefficients,
    input: &AssemblyInput,
) -> Result<(Vec<f64>, Vec<f64>), CoreError> {
    let space = &input.u.space;
    let mesh = &space.mesh;
    let elem = mesh.element(e);
    let which = input.which;
    let r = space.order(e);
    let bs = space.block_size(e);
    let nloc = which.n_active() * bs;
    let scale = [2.0 / elem.extent[0], 2.0 / elem.extent[1]];
    let implicit = input.jacobian_mode == JacobianMode::FullImplicit
        && which == WhichSystem::Coupled;
    let tau_alpha = input.tau * input.alpha;
    let tau_old = input.tau * (1.0 - input.alpha);

    let mut res = vec![0.0; nloc];
    let mut jac = vec![0.0; nloc * nloc];
    let mut bp = BasisPoint::new(r);
    let mut kgrad = vec![[0.0f64; 2]; bs];

    // Row/column index helpers within the local block.
    let p_idx = |m: usize| m;
    let s_idx = move |m: usize| if which == WhichSystem::Coupled { bs + m } else { m };

    let p_blk = input.u.field_block(e, 0);
    let s_blk = input.u.field_block(e, 1);
    let sb_blk = input.s_bar.field_block(e, 1);
    let pold_blk = input.u_old.field_block(e, 0);
    let sold_blk = input.u_old.field_block(e, 1);

    let rule = QuadratureRule::with_degree(2 * r as usize + 1).tensor_square();
    let jac_area = 0.25 * elem.area;
    let fluids = &setup.fluids;
    let p_g = model.p_g(fluids);

    for &(xi, wq) in &rule {
        let w = wq * jac_area;
        bp.eval(r, xi, scale);
        let x = elem.to_physical(xi);
        let rock = setup.rock_at(x);
        let k = &rock.permeability;

        let sb = eval_value(sb_blk, &bp.vals);
        let gp = eval_grad(p_blk, &bp.grads);
        let (s_val, gs) = match which {
            WhichSystem::PressureOnly => (sb, eval_grad(sb_blk, &bp.grads)),
            _ => (eval_value(s_blk, &bp.vals), eval_grad(s_blk, &bp.grads)),
        };
        let c = model.eval(rock, fluids, sb).map_err(|err| domain_err(err, e))?;

        let kgp = mat2vec(k, gp);
        let kgs = mat2vec(k, gs);
        let kg = mat2vec(k, fluids.gravity);
        let kpg = mat2vec(k, p_g);
        for (m, g) in bp.grads.iter().enumerate() {
            kgrad[m] = mat2vec(k, *g);
        }

        if which.pressure_active() {
            let flux_p = [
                c.a_pp * kgp[0] + c.a_ps * kgs[0] + c.g_p * kg[0],
                c.a_pp * kgp[1] + c.a_ps * kgs[1] + c.g_p * kg[1],
            ];
            let q_p = (setup.source_p)(x);
            for m in 0..bs {
                res[p_idx(m)] += w * (dot2(flux_p, bp.grads[m]) - q_p * bp.vals[m]);
            }
            for m in 0..bs {
                let gm = bp.grads[m];
                for n in 0..bs {
                    jac[p_idx(m) * nloc + p_idx(n)] += w * c.a_pp * dot2(kgrad[n], gm);
                }
            }
            if which == WhichSystem::Coupled {
                let dflux = [
                    c.da_pp * kgp[0] + c.da_ps * kgs[0] + c.dg_p * kg[0],
                    c.da_pp * kgp[1] + c.da_ps * kgs[1] + c.dg_p * kg[1],
                ];
                for m in 0..bs {
                    let gm = bp.grads[m];
                    for n in 0..bs {
                        let mut v = c.a_ps * dot2(kgrad[n], gm);
                        if implicit {
                            v += dot2(dflux, gm) * bp.vals[n];
                        }
                        jac[p_idx(m) * nloc + s_idx(n)] += w * v;
                    }
                }
            }
        }

        if which.saturation_active() {
            let s_old = eval_value(sold_blk, &bp.vals);
            let q_s = (setup.source_s)(x);
            let flux_s = [
                c.a_sp * (kgp[0] - kpg[0]) + c.a_ss * kgs[0],
                c.a_sp * (kgp[1] - kpg[1]) + c.a_ss * kgs[1],
            ];
            for m in 0..bs {
                res[s_idx(m)] += w * rock.porosity * (s_val - s_old) * bp.vals[m]
                    + tau_alpha * w * (dot2(flux_s, bp.grads[m]) - q_s * bp.vals[m]);
            }
            if tau_old != 0.0 {
                let c_old = model
                    .eval(rock, fluids, s_old)
                    .map_err(|err| domain_err(err, e))?;
                let gp_old = eval_grad(pold_blk, &bp.grads);
                let gs_old = eval_grad(sold_blk, &bp.grads);
                let kgp_o = mat2vec(k, gp_old);
                let kgs_o = mat2vec(k, gs_old);
                let flux_s_old = [
                    c_old.a_sp * (kgp_o[0] - kpg[0]) + c_old.a_ss * kgs_o[0],
                    c_old.a_sp * (kgp_o[1] - kpg[1]) + c_old.a_ss * kgs_o[1],
                ];
                for m in 0..bs {
                    res[s_idx(m)] +=
                        tau_old * w * (dot2(flux_s_old, bp.grads[m]) - q_s * bp.vals[m]);
                }
            }
            // Mass term Jacobian.
            for m in 0..bs {
                for n in 0..bs {
                    jac[s_idx(m) * nloc + s_idx(n)] +=
                        w * rock.porosity * bp.vals[n] * bp.vals[m];
                }
            }
            if which == WhichSystem::Coupled {
                for m in 0..bs {
                    let gm = bp.grads[m];
                    for n in 0..bs {
                        jac[s_idx(m) * nloc + p_idx(n)] +=
                            tau_alpha * w * c.a_sp * dot2(kgrad[n], gm);
                    }
                }
            }
            let dflux = [
                c.da_sp * (kgp[0] - kpg[0]) + c.da_ss * kgs[0],
                c.da_sp * (kgp[1] - kpg[1]) + c.da_ss * kgs[1],
            ];
            for m in 0..bs {
                let gm = bp.grads[m];
                for n in 0..bs {
                    let mut v = c.a_ss * dot2(kgrad[n], gm);
                    if implicit {
                        v += dot2(dflux, gm) * bp.vals[n];
                    }
                    jac[s_idx(m) * nloc + s_idx(n)] += tau_alpha * w * v;
                }
            }
        }
    }
    Ok((res, jac))
}

struct SideState {
    basis: BasisPoint,
    p: f64,
    gp: [f64; 2],
    s: f64,
    gs: [f64; 2],
    sb: f64,
    p_old: f64,
    gp_old: [f64; 2],
    s_old: f64,
    gs_old: [f64; 2],
}

impl SideState {
    fn new(order: u8) -> SideState {
        SideState {
            basis: BasisPoint::new(order),
            p: 0.0,
            gp: [0.0; 2],
            s: 0.0,
            gs: [0.0; 2],
            sb: 0.0,
            p_old: 0.0,
            gp_old: [0.0; 2],
            s_old: 0.0,
            gs_old: [0.0; 2],
        }
    }

    fn gather(
        &mut self,
        e: usize,
        order: u8,
        xi: [f64; 2],
        scale: [f64; 2],
        input: &AssemblyInput,
        need_old: bool,
    ) {
        self.basis.eval(order, xi, scale);
        let u = input.u;
        self.p = eval_value(u.field_block(e, 0), &self.basis.vals);
        self.gp = eval_grad(u.field_block(e, 0), &self.basis.grads);
        self.sb = eval_value(input.s_bar.field_block(e, 1), &self.basis.vals);
        match input.which {
            WhichSystem::PressureOnly => {
                self.s = self.sb;
                self.gs = eval_grad(input.s_bar.field_block(e, 1), &self.basis.grads);
            }
            _ => {
                self.s = eval_value(u.field_block(e, 1), &self.basis.vals);
                self.gs = eval_grad(u.field_block(e, 1), &self.basis.grads);
            }
        }
        if need_old {
            self.p_old = eval_value(input.u_old.field_block(e, 0), &self.basis.vals);
            self.gp_old = eval_grad(input.u_old.field_block(e, 0), &self.basis.grads);
            self.s_old = eval_value(input.u_old.field_block(e, 1), &self.basis.vals);
            self.gs_old = eval_grad(input.u_old.field_block(e, 1), &self.basis.grads);
        }
    }
}

fn assemble_face(
    f: usize,
    setup: &ProblemSetup,
    model: &ModelCoefficients,
    config: &FormConfig,
    input: &AssemblyInput,
    sigma: f64,
) -> Result<FaceLocal, CoreError> {
    let space = &input.u.space;
    let mesh = &space.mesh;
    let face = &mesh.faces[f];
    let which = input.which;
    let em = face.inside;
    let elem_m = mesh.element(em);
    let rm = space.order(em);
    let bsm = space.block_size(em);
    let nloc_m = which.n_active() * bsm;
    let scale_m = [2.0 / elem_m.extent[0], 2.0 / elem_m.extent[1]];
    let implicit =
        input.jacobian_mode == JacobianMode::FullImplicit && which == WhichSystem::Coupled;
    let tau_alpha = input.tau * input.alpha;
    let tau_old = input.tau * (1.0 - input.alpha);
    let need_old = tau_old != 0.0 && which.saturation_active();
    let fluids = &setup.fluids;
    let p_g = model.p_g(fluids);
    let nu = face.normal;

    let p_idx_m = |m: usize| m;
    let s_idx_m = move |m: usize| if which == WhichSystem::Coupled { bsm + m } else { m };

    let mut local = FaceLocal {
        res_m: vec![0.0; nloc_m],
        res_p: Vec::new(),
        jmm: vec![0.0; nloc_m * nloc_m],
        jmp: Vec::new(),
        jpm: Vec::new(),
        jpp: Vec::new(),
    };
    let mut side_m = SideState::new(rm);

    let (gamma_p, gamma_s) = penalty_factors(face, mesh, setup, model, config)
        .map_err(|e| domain_err(e, em))?;

    match face.neighbor {
        FaceNeighbor::Boundary(side) => {
            let rule = QuadratureRule::with_degree(2 * rm as usize + 1);
            let kind = setup.boundary.kind(side);
            for (&t, &wq) in rule.points.iter().zip(&rule.weights) {
                let w = wq * 0.5 * face.measure;
                let x = face_point(face, t);
                side_m.gather(em, rm, elem_m.to_reference(x), scale_m, input, need_old);
                let rock = setup.rock_at(x);
                let k = &rock.permeability;
                match kind {
                    BoundaryKind::Neumann => {
                        if which.pressure_active() {
                            let j_t = (setup.flux_n)(x) + (setup.flux_w)(x);
                            for m in 0..bsm {
                                local.res_m[p_idx_m(m)] += w * j_t * side_m.basis.vals[m];
                            }
                        }
                        if which.saturation_active() {
                            let j_n = (setup.flux_n)(x);
                            for m in 0..bsm {
                                local.res_m[s_idx_m(m)] +=
                                    (tau_alpha + tau_old) * w * j_n * side_m.basis.vals[m];
                            }
                        }
                    }
                    BoundaryKind::Dirichlet => {
                        let c = model
                            .eval(rock, fluids, side_m.sb)
                            .map_err(|err| domain_err(err, em))?;
                        let s_d = (setup.dirichlet_saturation)(x);
                        let p_d = (setup.dirichlet_pressure)(x)
                            + model
                                .pressure_shift(rock, fluids, s_d)
                                .map_err(|err| domain_err(err, em))?;
                        let kgp = mat2vec(k, side_m.gp);
                        let kgs = mat2vec(k, side_m.gs);
                        let kg = mat2vec(k, fluids.gravity);
                        let kpg = mat2vec(k, p_g);
                        let mut kgrad_nu = vec![0.0; bsm];
                        for (n, g) in side_m.basis.grads.iter().enumerate() {
                            kgrad_nu[n] = dot2(mat2vec(k, *g), nu);
                        }

                        if which.pressure_active() {
                            let flux_nu = c.a_pp * dot2(kgp, nu)
                                + c.a_ps * dot2(kgs, nu)
                                + c.g_p * dot2(kg, nu);
                            for m in 0..bsm {
                                let phi = side_m.basis.vals[m];
                                local.res_m[p_idx_m(m)] += w
                                    * (-flux_nu * phi + sigma * gamma_p * (side_m.p - p_d) * phi);
                            }
                            for m in 0..bsm {
                                let phi = side_m.basis.vals[m];
                                for n in 0..bsm {
                                    jac_add(
                                        &mut local.jmm,
                                        nloc_m,
                                        p_idx_m(m),
                                        p_idx_m(n),
                                        w * (-c.a_pp * kgrad_nu[n] * phi
                                            + sigma * gamma_p * side_m.basis.vals[n] * phi),
                                    );
                                }
                                if which == WhichSystem::Coupled {
                                    let dflux_nu = c.da_pp * dot2(kgp, nu)
                                        + c.da_ps * dot2(kgs, nu)
                                        + c.dg_p * dot2(kg, nu);
                                    for n in 0..bsm {
                                        let mut v = -c.a_ps * kgrad_nu[n] * phi;
                                        if implicit {
                                            v += -dflux_nu * side_m.basis.vals[n] * phi;
                                        }
                                        jac_add(
                                            &mut local.jmm,
                                            nloc_m,
                                            p_idx_m(m),
                                            s_idx_m(n),
                                            w * v,
                                        );
                                    }
                                }
                            }
                        }
                        if which.saturation_active() {
                            let flux_nu = c.a_sp * (dot2(kgp, nu) - dot2(kpg, nu))
                                + c.a_ss * dot2(kgs, nu);
                            for m in 0..bsm {
                                let phi = side_m.basis.vals[m];
                                local.res_m[s_idx_m(m)] += tau_alpha
                                    * w
                                    * (-flux_nu * phi + sigma * gamma_s * (side_m.s - s_d) * phi);
                            }
                            if need_old {
                                let c_old = model
                                    .eval(rock, fluids, side_m.s_old)
                                    .map_err(|err| domain_err(err, em))?;
                                let flux_nu_old = c_old.a_sp
                                    * (dot2(mat2vec(k, side_m.gp_old), nu) - dot2(kpg, nu))
                                    + c_old.a_ss * dot2(mat2vec(k, side_m.gs_old), nu);
                                for m in 0..bsm {
                                    let phi = side_m.basis.vals[m];
                                    local.res_m[s_idx_m(m)] += tau_old
                                        * w
                                        * (-flux_nu_old * phi
                                            + sigma * gamma_s * (side_m.s_old - s_d) * phi);
                                }
                            }
                            for m in 0..bsm {
                                let phi = side_m.basis.vals[m];
                                if which == WhichSystem::Coupled {
                                    for n in 0..bsm {
                                        jac_add(
                                            &mut local.jmm,
                                            nloc_m,
                                            s_idx_m(m),
                                            p_idx_m(n),
                                            -tau_alpha * w * c.a_sp * kgrad_nu[n] * phi,
                                        );
                                    }
                                }
                                let dflux_nu = c.da_sp * (dot2(kgp, nu) - dot2(kpg, nu))
                                    + c.da_ss * dot2(kgs, nu);
                                for n in 0..bsm {
                                    let mut v = -c.a_ss * kgrad_nu[n] * phi
                                        + sigma * gamma_s * side_m.basis.vals[n] * phi;
                                    if implicit {
                                        v += -dflux_nu * side_m.basis.vals[n] * phi;
                                    }
                                    jac_add(
                                        &mut local.jmm,
                                        nloc_m,
                                        s_idx_m(m),
                                        s_idx_m(n),
                                        tau_alpha * w * v,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        FaceNeighbor::Interior(ep) => {
            let elem_p = mesh.element(ep);
            let rp = space.order(ep);
            let bsp = space.block_size(ep);
            let nloc_p = which.n_active() * bsp;
            let scale_p = [2.0 / elem_p.extent[0], 2.0 / elem_p.extent[1]];
            local.res_p = vec![0.0; nloc_p];
            local.jmp = vec![0.0; nloc_m * nloc_p];
            local.jpm = vec![0.0; nloc_p * nloc_m];
            local.jpp = vec![0.0; nloc_p * nloc_p];
            let mut side_p = SideState::new(rp);
            let p_idx_p = |m: usize| m;
            let s_idx_p =
                move |m: usize| if which == WhichSystem::Coupled { bsp + m } else { m };

            let rule = QuadratureRule::with_degree(2 * rm.max(rp) as usize + 1);
            for (&t, &wq) in rule.points.iter().zip(&rule.weights) {
                let w = wq * 0.5 * face.measure;
                let x = face_point(face, t);
                side_m.gather(em, rm, elem_m.to_reference(x), scale_m, input, need_old);
                side_p.gather(ep, rp, elem_p.to_reference(x), scale_p, input, need_old);
                let rock = setup.rock_at(x);
                let k = &rock.permeability;
                let k_nu = rock.normal_permeability(nu);
                let (w_m, w_p) = face_weights(k_nu, k_nu)?;
                let c_m = model
                    .eval(rock, fluids, side_m.sb)
                    .map_err(|err| domain_err(err, em))?;
                let c_p = model
                    .eval(rock, fluids, side_p.sb)
                    .map_err(|err| domain_err(err, ep))?;
                let kg_nu = dot2(mat2vec(k, fluids.gravity), nu);
                let kpg_nu = dot2(mat2vec(k, p_g), nu);
                let mut kgrad_nu_m = vec![0.0; bsm];
                for (n, g) in side_m.basis.grads.iter().enumerate() {
                    kgrad_nu_m[n] = dot2(mat2vec(k, *g), nu);
                }
                let mut kgrad_nu_p = vec![0.0; bsp];
                for (n, g) in side_p.basis.grads.iter().enumerate() {
                    kgrad_nu_p[n] = dot2(mat2vec(k, *g), nu);
                }
                let kgp_nu_m = dot2(mat2vec(k, side_m.gp), nu);
                let kgs_nu_m = dot2(mat2vec(k, side_m.gs), nu);
                let kgp_nu_p = dot2(mat2vec(k, side_p.gp), nu);
                let kgs_nu_p = dot2(mat2vec(k, side_p.gs), nu);

                if which.pressure_active() {
                    let flux_m = c_m.a_pp * kgp_nu_m + c_m.a_ps * kgs_nu_m + c_m.g_p * kg_nu;
                    let flux_p = c_p.a_pp * kgp_nu_p + c_p.a_ps * kgs_nu_p + c_p.g_p * kg_nu;
                    let hat = w_m * flux_m + w_p * flux_p;
                    let jump_p = side_m.p - side_p.p;
                    for m in 0..bsm {
                        let phi = side_m.basis.vals[m];
                        local.res_m[p_idx_m(m)] +=
                            w * (-hat * phi + sigma * gamma_p * jump_p * phi);
                    }
                    for m in 0..bsp {
                        let phi = side_p.basis.vals[m];
                        local.res_p[p_idx_p(m)] +=
                            w * (hat * phi - sigma * gamma_p * jump_p * phi);
                    }
                    // Jacobian: d hat / d p and d/ds per side, penalty couplings.
                    let dflux_s_m = c_m.da_pp * kgp_nu_m + c_m.da_ps * kgs_nu_m + c_m.dg_p * kg_nu;
                    let dflux_s_p = c_p.da_pp * kgp_nu_p + c_p.da_ps * kgs_nu_p + c_p.dg_p * kg_nu;
                    for m in 0..bsm {
                        let phi = side_m.basis.vals[m];
                        for n in 0..bsm {
                            jac_add(
                                &mut local.jmm,
                                nloc_m,
                                p_idx_m(m),
                                p_idx_m(n),
                                w * (-w_m * c_m.a_pp * kgrad_nu_m[n] * phi
                                    + sigma * gamma_p * side_m.basis.vals[n] * phi),
                            );
                        }
                        for n in 0..bsp {
                            jac_set(
                                &mut local.jmp,
                                nloc_p,
                                p_idx_m(m),
                                p_idx_p(n),
                                w * (-w_p * c_p.a_pp * kgrad_nu_p[n] * phi
                                    - sigma * gamma_p * side_p.basis.vals[n] * phi),
                            );
                        }
                        if which == WhichSystem::Coupled {
                            for n in 0..bsm {
                                let mut v = -w_m * c_m.a_ps * kgrad_nu_m[n] * phi;
                                if implicit {
                                    v += -w_m * dflux_s_m * side_m.basis.vals[n] * phi;
                                }
                                jac_add(&mut local.jmm, nloc_m, p_idx_m(m), s_idx_m(n), w * v);
                            }
                            for n in 0..bsp {
                                let mut v = -w_p * c_p.a_ps * kgrad_nu_p[n] * phi;
                                if implicit {
                                    v += -w_p * dflux_s_p * side_p.basis.vals[n] * phi;
                                }
                                jac_set(&mut local.jmp, nloc_p, p_idx_m(m), s_idx_p(n), w * v);
                            }
                        }
                    }
                    for m in 0..bsp {
                        let phi = side_p.basis.vals[m];
                        for n in 0..bsm {
                            jac_set(
                                &mut local.jpm,
                                nloc_m,
                                p_idx_p(m),
                                p_idx_m(n),
                                w * (w_m * c_m.a_pp * kgrad_nu_m[n] * phi
                                    - sigma * gamma_p * side_m.basis.vals[n] * phi),
                            );
                        }
                        for n in 0..bsp {
                            jac_add(
                                &mut local.jpp,
                                nloc_p,
                                p_idx_p(m),
                                p_idx_p(n),
                                w * (w_p * c_p.a_pp * kgrad_nu_p[n] * phi
                                    + sigma * gamma_p * side_p.basis.vals[n] * phi),
                            );
                        }
                        if which == WhichSystem::Coupled {
                            for n in 0..bsm {
                                let mut v = w_m * c_m.a_ps * kgrad_nu_m[n] * phi;
                                if implicit {
                                    v += w_m * dflux_s_m * side_m.basis.vals[n] * phi;
                                }
                                jac_set(&mut local.jpm, nloc_m, p_idx_p(m), s_idx_m(n), w * v);
                            }
                            for n in 0..bsp {
                                let mut v = w_p * c_p.a_ps * kgrad_nu_p[n] * phi;
                                if implicit {
                                    v += w_p * dflux_s_p * side_p.basis.vals[n] * phi;
                                }
                                jac_add(&mut local.jpp, nloc_p, p_idx_p(m), s_idx_p(n), w * v);
                            }
                        }
                    }
                }

                if which.saturation_active() {
                    let flux_m =
                        c_m.a_sp * (kgp_nu_m - kpg_nu) + c_m.a_ss * kgs_nu_m;
                    let flux_p =
                        c_p.a_sp * (kgp_nu_p - kpg_nu) + c_p.a_ss * kgs_nu_p;
                    let hat = w_m * flux_m + w_p * flux_p;
                    let jump_s = side_m.s - side_p.s;
                    for m in 0..bsm {
                        let phi = side_m.basis.vals[m];
                        local.res_m[s_idx_m(m)] +=
                            tau_alpha * w * (-hat * phi + sigma * gamma_s * jump_s * phi);
                    }
                    for m in 0..bsp {
                        let phi = side_p.basis.vals[m];
                        local.res_p[s_idx_p(m)] +=
                            tau_alpha * w * (hat * phi - sigma * gamma_s * jump_s * phi);
                    }
                    if need_old {
                        let c_mo = model
                            .eval(rock, fluids, side_m.s_old)
                            .map_err(|err| domain_err(err, em))?;
                        let c_po = model
                            .eval(rock, fluids, side_p.s_old)
                            .map_err(|err| domain_err(err, ep))?;
                        let flux_mo = c_mo.a_sp
                            * (dot2(mat2vec(k, side_m.gp_old), nu) - kpg_nu)
                            + c_mo.a_ss * dot2(mat2vec(k, side_m.gs_old), nu);
                        let flux_po = c_po.a_sp
                            * (dot2(mat2vec(k, side_p.gp_old), nu) - kpg_nu)
                            + c_po.a_ss * dot2(mat2vec(k, side_p.gs_old), nu);
                        let hat_o = w_m * flux_mo + w_p * flux_po;
                        let jump_o = side_m.s_old - side_p.s_old;
                        for m in 0..bsm {
                            let phi = side_m.basis.vals[m];
                            local.res_m[s_idx_m(m)] +=
                                tau_old * w * (-hat_o * phi + sigma * gamma_s * jump_o * phi);
                        }
                        for m in 0..bsp {
                            let phi = side_p.basis.vals[m];
                            local.res_p[s_idx_p(m)] +=
                                tau_old * w * (hat_o * phi - sigma * gamma_s * jump_o * phi);
                        }
                    }
                    let dflux_s_m = c_m.da_sp * (kgp_nu_m - kpg_nu) + c_m.da_ss * kgs_nu_m;
                    let dflux_s_p = c_p.da_sp * (kgp_nu_p - kpg_nu) + c_p.da_ss * kgs_nu_p;
                    for m in 0..bsm {
                        let phi = side_m.basis.vals[m];
                        if which == WhichSystem::Coupled {
                            for n in 0..bsm {
                                jac_add(
                                    &mut local.jmm,
                                    nloc_m,
                                    s_idx_m(m),
                                    p_idx_m(n),
                                    -tau_alpha * w * w_m * c_m.a_sp * kgrad_nu_m[n] * phi,
                                );
                            }
                            for n in 0..bsp {
                                jac_set(
                                    &mut local.jmp,
                                    nloc_p,
                                    s_idx_m(m),
                                    p_idx_p(n),
                                    -tau_alpha * w * w_p * c_p.a_sp * kgrad_nu_p[n] * phi,
                                );
                            }
                        }
                        for n in 0..bsm {
                            let mut v = -w_m * c_m.a_ss * kgrad_nu_m[n] * phi
                                + sigma * gamma_s * side_m.basis.vals[n] * phi;
                            if implicit {
                                v += -w_m * dflux_s_m * side_m.basis.vals[n] * phi;
                            }
                            jac_add(&mut local.jmm, nloc_m, s_idx_m(m), s_idx_m(n), tau_alpha * w * v);
                        }
                        for n in 0..bsp {
                            let mut v = -w_p * c_p.a_ss * kgrad_nu_p[n] * phi
                                - sigma * gamma_s * side_p.basis.vals[n] * phi;
                            if implicit {
                                v += -w_p * dflux_s_p * side_p.basis.vals[n] * phi;
                            }
                            jac_add(&mut local.jmp, nloc_p, s_idx_m(m), s_idx_p(n), tau_alpha * w * v);
                        }
                    }
                    for m in 0..bsp {
                        let phi = side_p.basis.vals[m];
                        if which == WhichSystem::Coupled {
                            for n in 0..bsm {
                                jac_add(
                                    &mut local.jpm,
                                    nloc_m,
                                    s_idx_p(m),
                                    p_idx_m(n),
                                    tau_alpha * w * w_m * c_m.a_sp * kgrad_nu_m[n] * phi,
                                );
                            }
                            for n in 0..bsp {
                                jac_set(
                                    &mut local.jpp,
                                    nloc_p,
                                    s_idx_p(m),
                                    p_idx_p(n),
                                    tau_alpha * w * w_p * c_p.a_sp * kgrad_nu_p[n] * phi,
                                );
                            }
                        }
                        for n in 0..bsm {
                            let mut v = w_m * c_m.a_ss * kgrad_nu_m[n] * phi
                                - sigma * gamma_s * side_m.basis.vals[n] * phi;
                            if implicit {
                                v += w_m * dflux_s_m * side_m.basis.vals[n] * phi;
                            }
                            jac_add(&mut local.jpm, nloc_m, s_idx_p(m), s_idx_m(n), tau_alpha * w * v);
                        }
                        for n in 0..bsp {
                            let mut v = w_p * c_p.a_ss * kgrad_nu_p[n] * phi
                                + sigma * gamma_s * side_p.basis.vals[n] * phi;
                            if implicit {
                                v += w_p * dflux_s_p * side_p.basis.vals[n] * phi;
                            }
                            jac_add(&mut local.jpp, nloc_p, s_idx_p(m), s_idx_p(n), tau_alpha * w * v);
                        }
                    }
                }
            }
        }
    }
    Ok(local)
}

#[inline]
fn jac_add(jac: &mut [f64], ncols: usize, row: usize, col: usize, v: f64) {
    jac[row * ncols + col] += v;
}

#[inline]
fn jac_set(jac: &mut [f64], ncols: usize, row: usize, col: usize, v: f64) {
    // Accumulating into rectangular cross blocks uses the same add semantics.
    jac[row * ncols + col] += v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgspace::DgFunction;
    use crate::mesh::Mesh;
    use crate::physics::{
        constant_field, BoundaryConfig, FrozenCoeffs, ModelKind, RockField,
    };
    use std::sync::Arc;

    fn unit_rock() -> RockParams {
        RockParams {
            porosity: 1.0,
            s_wr: 0.0,
            s_nr: 0.0,
            theta: 2.0,
            entry_pressure: 1.0,
            permeability: [[1.0, 0.0], [0.0, 1.0]],
        }
    }

    fn unit_fluids() -> FluidParams {
        FluidParams {
            rho_w: 1.0,
            rho_n: 1.0,
            mu_w: 1.0,
            mu_n: 1.0,
            gravity: [0.0, 0.0],
        }
    }

    fn plain_setup(boundary: BoundaryConfig) -> ProblemSetup {
        ProblemSetup {
            name: "test".into(),
            fluids: unit_fluids(),
            rock: RockField::Uniform(unit_rock()),
            boundary,
            dirichlet_pressure: constant_field(0.0),
            dirichlet_saturation: constant_field(0.0),
            initial_pressure: constant_field(0.0),
            initial_saturation: constant_field(0.0),
            flux_n: constant_field(0.0),
            flux_w: constant_field(0.0),
            source_p: constant_field(0.0),
            source_s: constant_field(0.0),
            final_time: 1.0,
            cutoff: false,
            pin_pressure: true,
            domain_extent: (1.0, 1.0),
            default_macro: (1, 1),
        }
    }

    fn frozen_model() -> ModelCoefficients {
        ModelCoefficients::frozen(FrozenCoeffs {
            a_pp: 1.0,
            a_ps: 0.0,
            a_sp: 0.0,
            a_ss: 1.0,
            g_p: 0.0,
        })
    }

    fn two_field(space: &Arc<crate::dgspace::DgSpace>) -> DgFunction {
        DgFunction::zeros(space.clone())
    }

    #[test]
    fn weighted_average_examples() {
        // Equal permeabilities: arithmetic mean.
        assert_eq!(weighted_average(2.0, Some(4.0), 1.0, 1.0).unwrap(), 3.0);
        // Weights lean toward the low-permeability side's trace.
        let (wm, wp) = face_weights(1e-10, 1e-12).unwrap();
        assert!((wm - 1.0 / 101.0).abs() < 1e-15);
        assert!((wp - 100.0 / 101.0).abs() < 1e-15);
        // Boundary: inside trace regardless of k.
        assert_eq!(weighted_average(7.0, None, 1e-30, 0.0).unwrap(), 7.0);
        // Degenerate face.
        assert!(face_weights(0.0, 0.0).is_err());
    }

    #[test]
    fn sigma_values() {
        assert_eq!(sigma_default(3), 12.0);
        assert_eq!(sigma_default(1), 2.0);
    }

    #[test]
    fn penalty_factor_geometry() {
        // Equal k and equal areas: harmonic factor k, geometric factor |e|/|E|.
        let rock = unit_rock();
        let fluids = unit_fluids();
        let model = ModelCoefficients::for_kind(ModelKind::A, false);
        let (gp, gs) = penalty_factors_general(
            &rock,
            Some(&rock),
            1.0,
            Some(1.0),
            1.0,
            [1.0, 0.0],
            &model,
            &fluids,
            0.5,
        )
        .unwrap();
        // delta_p = l_n(0.5) + l_w(0.5), delta_s = l_n(0.5) p_c'(0.5), k = 1.
        let cap = crate::physics::brooks_corey(&rock, &fluids, 0.5, false).unwrap();
        let delta_p = cap.lambda_n + cap.lambda_w;
        let delta_s = cap.lambda_n * cap.dp_c;
        assert!((gp - delta_p).abs() < 1e-14);
        assert!((gs - delta_s).abs() < 1e-14);
        // Hand values: s_we = s_ne = 0.5, k_rw = 0.5^4 = 0.0625,
        // k_rn = 0.25 (1 - 0.25) = 0.1875, dp_c = 0.5 * 0.5^{-1.5}.
        assert!((delta_s - 0.1875 * 0.5 * 0.5f64.powf(-1.5)).abs() < 1e-14);
    }

    fn assemble_simple(
        setup: &ProblemSetup,
        model: &ModelCoefficients,
        u: &DgFunction,
        u_old: &DgFunction,
        which: WhichSystem,
        beta: Option<f64>,
    ) -> AssembledSystem {
        let config = FormConfig {
            beta,
            ..FormConfig::default()
        };
        let input = AssemblyInput {
            u,
            u_old,
            s_bar: u_old,
            which,
            jacobian_mode: JacobianMode::FrozenIntermediate,
            tau: 1.0,
            alpha: 1.0,
        };
        assemble_system(setup, model, &config, &input).unwrap()
    }

    #[test]
    fn constant_steady_state_has_zero_residual() {
        // Constants matching the Dirichlet data, no gravity, no sources.
        let mesh = Arc::new(Mesh::build_macro(3, 2, (1.0, 1.0), 3).unwrap());
        let space = Arc::new(crate::dgspace::DgSpace::uniform(mesh, 2, 2));
        let mut setup = plain_setup(BoundaryConfig::all_dirichlet());
        setup.pin_pressure = false;
        setup.dirichlet_pressure = constant_field(5.0);
        setup.dirichlet_saturation = constant_field(0.3);
        let model = ModelCoefficients::for_kind(ModelKind::A, false);
        let mut u = two_field(&space);
        u.project_analytic(0, |_| 5.0);
        u.project_analytic(1, |_| 0.3);
        let sys = assemble_simple(&setup, &model, &u, &u.clone(), WhichSystem::Coupled, None);
        let norm = crate::solver::norm(&sys.residual);
        assert!(norm < 1e-12, "steady residual {norm}");
    }

    #[test]
    fn single_face_penalty_matches_hand_integration() {
        // Two unit elements, p jumps by 1 across the single interior face,
        // everything else suppressed; frozen coefficients make delta_p = 1,
        // so gamma_p = 1 and the constant-mode entry is sigma * gamma * |e| * Phi_0.
        let mesh = Arc::new(Mesh::build_macro(2, 1, (2.0, 1.0), 3).unwrap());
        let space = Arc::new(crate::dgspace::DgSpace::uniform(mesh, 1, 2));
        let mut setup = plain_setup(BoundaryConfig::all_dirichlet());
        setup.pin_pressure = false;
        setup.dirichlet_pressure = Arc::new(|x| if x[0] < 1.0 { 1.0 } else { 0.0 });
        let model = frozen_model();
        let mut u = two_field(&space);
        u.project_analytic(0, |x| if x[0] < 1.0 { 1.0 } else { 0.0 });
        let u_old = u.clone();
        let sys = assemble_simple(&setup, &model, &u, &u_old, WhichSystem::Coupled, None);
        // sigma = r(r+1) = 2, gamma_p = 1, |e| = 1, Phi_0 = 1/2.
        let bs = 4;
        let expect = 2.0 * 1.0 * 1.0 * 0.5;
        assert!((sys.residual[0] - expect).abs() < 1e-12, "{}", sys.residual[0]);
        assert!((sys.residual[2 * bs] + expect).abs() < 1e-12);
    }

    #[test]
    fn inflow_load_on_constant_mode() {
        let mesh = Arc::new(Mesh::build_macro(1, 1, (1.0, 1.0), 3).unwrap());
        let space = Arc::new(crate::dgspace::DgSpace::uniform(mesh, 1, 2));
        let mut setup = plain_setup(BoundaryConfig {
            west: BoundaryKind::Dirichlet,
            east: BoundaryKind::Neumann,
            south: BoundaryKind::Neumann,
            north: BoundaryKind::Neumann,
        });
        setup.pin_pressure = false;
        let j_n = -5.137e-5;
        setup.flux_n = Arc::new(move |x| if (x[1] - 1.0).abs() < 1e-9 { j_n } else { 0.0 });
        let model = frozen_model();
        let u = two_field(&space);
        let sys = assemble_simple(&setup, &model, &u, &u.clone(), WhichSystem::Coupled, None);
        // Top edge length 1; the functional against phi = 1 equals J_n * l,
        // i.e. the normalized constant mode carries J_n * l * Phi_0.
        let bs = 4;
        assert!((sys.residual[0] - j_n * 1.0 * 0.5).abs() < 1e-18);
        // tau = 1, alpha = 1: saturation row gets tau * J_n * l * Phi_0.
        assert!((sys.residual[bs] - j_n * 1.0 * 0.5).abs() < 1e-18);
    }

    #[test]
    fn one_element_laplacian_matches_hand_stiffness() {
        // Single reference-square element, frozen a_pp = 1, K = I: the
        // pressure Jacobian is the dense stiffness diag(0, 3, 3, 6) in mode
        // order (00, 01, 10, 11); boundary all Neumann so no face terms.
        let mesh = Arc::new(Mesh::build_macro(1, 1, (2.0, 2.0), 3).unwrap());
        let space = Arc::new(crate::dgspace::DgSpace::uniform(mesh, 1, 2));
        let setup = plain_setup(BoundaryConfig::all_neumann());
        let model = frozen_model();
        let u = two_field(&space);
        let sys = assemble_simple(&setup, &model, &u, &u.clone(), WhichSystem::PressureOnly, None);
        let expect = [0.0, 3.0, 3.0, 6.0];
        let blocks: Vec<(usize, &[f64])> = sys.jacobian.row_blocks(0).collect();
        let (_, diag) = blocks[0];
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expect[i] } else { 0.0 };
                // Row 0 was pinned to the unit row.
                let want = if i == 0 {
                    if j == 0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    want
                };
                assert!(
                    (diag[i * 4 + j] - want).abs() < 1e-12,
                    "stiffness[{i}][{j}] = {} want {want}",
                    diag[i * 4 + j]
                );
            }
        }
    }

    #[test]
    fn penalty_blocks_are_symmetric() {
        // Penalty part isolated as J(beta = 2) - J(beta = 0); its (m,p) block
        // must be the transpose of (p,m).
        let mesh = Arc::new(Mesh::build_macro(2, 1, (2.0, 1.0), 3).unwrap());
        let space = Arc::new(crate::dgspace::DgSpace::uniform(mesh, 2, 2));
        let mut setup = plain_setup(BoundaryConfig::all_neumann());
        setup.pin_pressure = false; // pinning would zero one row of the blocks
        let model = frozen_model();
        let mut u = two_field(&space);
        u.project_analytic(0, |x| x[0] * 0.3 + 0.1 * x[1]);
        u.project_analytic(1, |x| 0.2 + 0.05 * x[0]);
        let with = assemble_simple(&setup, &model, &u, &u.clone(), WhichSystem::Coupled, Some(2.0));
        let without = assemble_simple(&setup, &model, &u, &u.clone(), WhichSystem::Coupled, Some(0.0));
        let get = |sys: &AssembledSystem, r: usize, c: usize| -> Vec<f64> {
            sys.jacobian
                .row_blocks(r)
                .find(|(col, _)| *col == c)
                .map(|(_, b)| b.to_vec())
                .unwrap()
        };
        let bs = 2 * 9;
        let pen_mp: Vec<f64> = get(&with, 0, 1)
            .iter()
            .zip(get(&without, 0, 1))
            .map(|(a, b)| a - b)
            .collect();
        let pen_pm: Vec<f64> = get(&with, 1, 0)
            .iter()
            .zip(get(&without, 1, 0))
            .map(|(a, b)| a - b)
            .collect();
        for i in 0..bs {
            for j in 0..bs {
                assert!(
                    (pen_mp[i * bs + j] - pen_pm[j * bs + i]).abs() < 1e-12,
                    "penalty block not symmetric at ({i},{j})"
                );
            }
        }
    }

    fn fd_check(which: WhichSystem, mode: JacobianMode, alpha: f64, dirs: usize) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mesh = Arc::new(Mesh::build_macro(2, 2, (0.9, 0.65), 3).unwrap());
        let space = Arc::new(crate::dgspace::DgSpace::uniform(mesh, 2, 2));
        let setup = {
            let mut s = crate::physics::anisotropic_lens_setup();
            // Uniform exterior rock keeps the test smooth in space.
            s.rock = RockField::Uniform(*crate::physics::anisotropic_lens_setup().rock_at([0.1, 0.1]));
            s
        };
        let model = crate::physics::model_a_coefficients(&setup);
        let config = FormConfig::default();

        let mut u = two_field(&space);
        let mut u_old = two_field(&space);
        for e in 0..space.n_elements() {
            let bs = space.block_size(e);
            for f in 0..2 {
                let scale_mean = if f == 0 { 3000.0 } else { 0.35 };
                let scale_mode = if f == 0 { 40.0 } else { 0.01 };
                let block = u.field_block_mut(e, f);
                block[0] = 2.0 * (scale_mean * (1.0 + 0.1 * rng.gen_range(-1.0..1.0)));
                for c in block[1..bs].iter_mut() {
                    *c = scale_mode * rng.gen_range(-1.0..1.0);
                }
                let block = u_old.field_block_mut(e, f);
                block[0] = 2.0 * (scale_mean * (1.0 + 0.1 * rng.gen_range(-1.0..1.0)));
                for c in block[1..bs].iter_mut() {
                    *c = scale_mode * rng.gen_range(-1.0..1.0);
                }
            }
        }
        let s_bar = if mode == JacobianMode::FullImplicit {
            u.clone()
        } else {
            u_old.clone()
        };

        let assemble_at = |w: &DgFunction| -> (Vec<f64>, BlockMatrix) {
            let sb = if mode == JacobianMode::FullImplicit {
                w.clone()
            } else {
                s_bar.clone()
            };
            let input = AssemblyInput {
                u: w,
                u_old: &u_old,
                s_bar: &sb,
                which,
                jacobian_mode: mode,
                tau: 3.0,
                alpha,
            };
            let sys = assemble_system(&setup, &model, &config, &input).unwrap();
            (sys.residual, sys.jacobian)
        };

        let (_, jac) = assemble_at(&u);
        let x0 = gather_unknowns(&u, which);
        let n = x0.len();
        for _ in 0..dirs {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Direction scaled per field like the state itself.
            let mut k = 0;
            for e in 0..space.n_elements() {
                let bs = space.block_size(e);
                if which.pressure_active() {
                    for item in v[k..k + bs].iter_mut() {
                        *item *= 50.0;
                    }
                    k += bs;
                }
                if which.saturation_active() {
                    for item in v[k..k + bs].iter_mut() {
                        *item *= 0.01;
                    }
                    k += bs;
                }
            }
            let eps = 1e-6;
            let mut up = u.clone();
            let mut um = u.clone();
            let xp: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
            scatter_unknowns(&mut up, which, &xp);
            scatter_unknowns(&mut um, which, &xm);
            let (rp, _) = assemble_at(&up);
            let (rm, _) = assemble_at(&um);
            let fd: Vec<f64> = rp
                .iter()
                .zip(&rm)
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            let mut jv = vec![0.0; n];
            jac.matvec(&v, &mut jv);
            let num = fd
                .iter()
                .zip(&jv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(
                num / den < 1e-5,
                "jacobian mismatch {which:?} {mode:?}: rel = {}",
                num / den
            );
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_implicit() {
        fd_check(WhichSystem::Coupled, JacobianMode::FullImplicit, 1.0, 20);
    }

    #[test]
    fn jacobian_matches_finite_differences_frozen_and_split() {
        fd_check(WhichSystem::Coupled, JacobianMode::FrozenIntermediate, 1.0, 5);
        fd_check(WhichSystem::PressureOnly, JacobianMode::FrozenIntermediate, 1.0, 5);
        fd_check(
            WhichSystem::SaturationOnly,
            JacobianMode::FrozenIntermediate,
            1.0,
            5,
        );
        fd_check(WhichSystem::Coupled, JacobianMode::FullImplicit, 0.6, 5);
    }
}
