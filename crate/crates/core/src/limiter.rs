//! Bound-preserving scaling limiter for the saturation field.
//!
//! Each element polynomial is shrunk linearly toward its mean so that the
//! values at the combined volume and face quadrature set Lambda_E respect
//! the configured bounds; in the orthonormal modal basis this multiplies all
//! non-constant coefficients by the scaling factor, so the element mean is
//! untouched and the L2 norm cannot grow.

use crate::basis;
use crate::dgspace::DgFunction;
use crate::mesh::FaceNeighbor;
use crate::quadrature::QuadratureRule;

#[derive(Clone, Copy, Debug)]
pub struct LimiterConfig {
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        LimiterConfig {
            s_min: 0.0,
            s_max: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LimiterReport {
    /// Elements whose polynomial was scaled.
    pub limited: usize,
    /// Elements whose mean itself violated the bounds and was clamped.
    pub clamped_means: usize,
    pub min_chi: f64,
}

/// Points where an out-of-bounds value triggers no constraint because the
/// value coincides with the mean to rounding.
const DEGENERATE_SPREAD: f64 = 1e-14;

/// Apply the scaling limiter to `field` of `u` in place.
pub fn apply_scaling_limiter(
    u: &mut DgFunction,
    field: usize,
    cfg: &LimiterConfig,
) -> LimiterReport {
    assert!(cfg.s_min < cfg.s_max);
    let space = u.space.clone();
    let mesh = space.mesh.clone();
    let mut report = LimiterReport {
        min_chi: 1.0,
        ..LimiterReport::default()
    };

    let mut values: Vec<f64> = Vec::with_capacity(64);
    for e in 0..space.n_elements() {
        let r = space.order(e);
        let n = basis::block_size(r);
        {
            let block = u.field_block_mut(e, field);
            let mean = 0.5 * block[0];
            if mean < cfg.s_min || mean > cfg.s_max {
                block[0] = 2.0 * mean.clamp(cfg.s_min, cfg.s_max);
                report.clamped_means += 1;
            }
        }
        if r == 0 {
            continue;
        }

        values.clear();
        // Volume quadrature at the assembly degree.
        let rule = QuadratureRule::with_degree(2 * r as usize + 1).tensor_square();
        for &(xi, _) in &rule {
            values.push(u.eval(e, field, xi));
        }
        // Face quadrature points of every incident face, seen from this element.
        let elem = mesh.element(e).clone();
        for &fid in &mesh.element_faces[e] {
            let face = &mesh.faces[fid];
            let r_other = match face.neighbor {
                FaceNeighbor::Interior(nid) => space.order(nid),
                FaceNeighbor::Boundary(_) => r,
            };
            let deg = 2 * r.max(r_other) as usize + 1;
            let rule = QuadratureRule::with_degree(deg);
            for &t in &rule.points {
                let x = face_point(face, t);
                values.push(u.eval(e, field, elem.to_reference(x)));
            }
        }

        let mean = u.element_mean(e, field);
        let mut chi: f64 = 1.0;
        for &v in &values {
            let spread = mean - v;
            if spread.abs() < DEGENERATE_SPREAD {
                continue;
            }
            if v < cfg.s_min {
                chi = chi.min(((mean - cfg.s_min) / spread).abs());
            } else if v > cfg.s_max {
                chi = chi.min(((cfg.s_max - mean) / spread).abs());
            }
        }
        if chi < 1.0 {
            let block = u.field_block_mut(e, field);
            for c in block[1..n].iter_mut() {
                *c *= chi;
            }
            report.limited += 1;
            report.min_chi = report.min_chi.min(chi);
        }
    }
    report
}

/// Physical location of the 1D face quadrature coordinate t in [-1,1].
pub fn face_point(face: &crate::mesh::Face, t: f64) -> [f64; 2] {
    // Faces are axis-aligned; the tangent is the normal rotated by 90 degrees.
    let tangent = [-face.normal[1], face.normal[0]];
    [
        face.midpoint[0] + 0.5 * face.measure * t * tangent[0],
        face.midpoint[1] + 0.5 * face.measure * t * tangent[1],
    ]
}

/// Evaluate min/max of `field` over the combined quadrature set of every
/// element; used by bound monitoring.
pub fn field_range_on_quadrature(u: &DgFunction, field: usize) -> (f64, f64) {
    let space = &u.space;
    let mesh = &space.mesh;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in 0..space.n_elements() {
        let r = space.order(e);
        let rule = QuadratureRule::with_degree(2 * r as usize + 1).tensor_square();
        for &(xi, _) in &rule {
            let v = u.eval(e, field, xi);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let elem = mesh.element(e);
        for &fid in &mesh.element_faces[e] {
            let face = &mesh.faces[fid];
            let rule = QuadratureRule::with_degree(2 * r as usize + 1);
            for &t in &rule.points {
                let v = u.eval(e, field, elem.to_reference(face_point(face, t)));
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (lo, hi)
}
