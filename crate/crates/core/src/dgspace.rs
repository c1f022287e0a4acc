//! Variable-order modal DG function spaces over the adaptive mesh.
//!
//! Each element carries the full tensor space Q_{r_E} spanned by the
//! orthonormal Legendre tensor basis of [`crate::basis`]; a scalar unknown
//! occupies a contiguous block of (r_E+1)^2 coefficients, fields are laid out
//! per element (pressure block, then saturation block). Because the basis is
//! orthonormal and hierarchical, order reduction is coefficient truncation and
//! element L2 norms are coefficient norms scaled by |E|/4.

use std::sync::Arc;

use crate::basis;
use crate::mesh::{ElementId, Mesh};
use crate::quadrature::QuadratureRule;
use crate::Point;

#[derive(Clone, Debug)]
pub struct DgSpace {
    pub mesh: Arc<Mesh>,
    pub orders: Vec<u8>,
    pub n_fields: usize,
    offsets: Vec<usize>,
    n_dofs: usize,
}

impl DgSpace {
    pub fn new(mesh: Arc<Mesh>, orders: Vec<u8>, n_fields: usize) -> DgSpace {
        assert_eq!(orders.len(), mesh.n_elements());
        assert!(orders.iter().all(|&r| r <= basis::MAX_ORDER));
        let mut offsets = Vec::with_capacity(orders.len());
        let mut acc = 0usize;
        for &r in &orders {
            offsets.push(acc);
            acc += n_fields * basis::block_size(r);
        }
        DgSpace {
            mesh,
            orders,
            n_fields,
            offsets,
            n_dofs: acc,
        }
    }

    pub fn uniform(mesh: Arc<Mesh>, order: u8, n_fields: usize) -> DgSpace {
        let n = mesh.n_elements();
        DgSpace::new(mesh, vec![order; n], n_fields)
    }

    pub fn n_elements(&self) -> usize {
        self.orders.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn order(&self, e: ElementId) -> u8 {
        self.orders[e]
    }

    pub fn max_order(&self) -> u8 {
        self.orders.iter().copied().max().unwrap_or(1)
    }

    /// Modes per scalar field on element `e`.
    pub fn block_size(&self, e: ElementId) -> usize {
        basis::block_size(self.orders[e])
    }

    /// Start of the coefficient block of `field` on element `e`.
    pub fn field_offset(&self, e: ElementId, field: usize) -> usize {
        debug_assert!(field < self.n_fields);
        self.offsets[e] + field * self.block_size(e)
    }

    pub fn same_layout(&self, other: &DgSpace) -> bool {
        self.n_fields == other.n_fields
            && self.orders == other.orders
            && Arc::ptr_eq(&self.mesh, &other.mesh)
    }
}

#[derive(Clone, Debug)]
pub struct DgFunction {
    pub space: Arc<DgSpace>,
    pub coeffs: Vec<f64>,
}

impl DgFunction {
    pub fn zeros(space: Arc<DgSpace>) -> DgFunction {
        let n = space.n_dofs();
        DgFunction {
            space,
            coeffs: vec![0.0; n],
        }
    }

    pub fn field_block(&self, e: ElementId, field: usize) -> &[f64] {
        let o = self.space.field_offset(e, field);
        &self.coeffs[o..o + self.space.block_size(e)]
    }

    pub fn field_block_mut(&mut self, e: ElementId, field: usize) -> &mut [f64] {
        let o = self.space.field_offset(e, field);
        let bs = self.space.block_size(e);
        &mut self.coeffs[o..o + bs]
    }

    /// Evaluate one field at a reference point of element `e`.
    pub fn eval(&self, e: ElementId, field: usize, xi: [f64; 2]) -> f64 {
        let r = self.space.order(e);
        let n = basis::block_size(r);
        let mut vals = [0.0f64; 64];
        basis::tensor_values(r, xi, &mut vals[..n]);
        let block = self.field_block(e, field);
        block.iter().zip(&vals[..n]).map(|(c, v)| c * v).sum()
    }

    /// Element mean of one field; mode 0 carries it exactly.
    pub fn element_mean(&self, e: ElementId, field: usize) -> f64 {
        0.5 * self.field_block(e, field)[0]
    }

    /// Integral of one field over the whole domain.
    pub fn integral(&self, field: usize) -> f64 {
        (0..self.space.n_elements())
            .map(|e| self.element_mean(e, field) * self.space.mesh.element(e).area)
            .sum()
    }

    /// Exact L2 norm of one field (orthonormal basis, affine elements).
    pub fn l2_norm(&self, field: usize) -> f64 {
        let mut acc = 0.0;
        for e in 0..self.space.n_elements() {
            let scale = 0.25 * self.space.mesh.element(e).area;
            acc += scale
                * self
                    .field_block(e, field)
                    .iter()
                    .map(|c| c * c)
                    .sum::<f64>();
        }
        acc.sqrt()
    }

    /// L2 norm of the difference of one field against another function on the
    /// same layout.
    pub fn l2_distance(&self, other: &DgFunction, field: usize) -> f64 {
        assert!(self.space.same_layout(&other.space));
        let mut acc = 0.0;
        for e in 0..self.space.n_elements() {
            let scale = 0.25 * self.space.mesh.element(e).area;
            acc += scale
                * self
                    .field_block(e, field)
                    .iter()
                    .zip(other.field_block(e, field))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
        }
        acc.sqrt()
    }

    /// L2-project a pointwise field into one component, quadrature degree
    /// 2 r_E + 1; exact for polynomial data up to degree r_E.
    pub fn project_analytic(&mut self, field: usize, f: impl Fn(Point) -> f64) {
        let space = self.space.clone();
        for e in 0..space.n_elements() {
            let r = space.order(e);
            let n = basis::block_size(r);
            let rule = QuadratureRule::with_degree(2 * r as usize + 1).tensor_square();
            let elem = space.mesh.element(e);
            let mut vals = [0.0f64; 64];
            let block = self.field_block_mut(e, field);
            block.fill(0.0);
            for &(xi, w) in &rule {
                let fx = f(elem.to_physical(xi));
                basis::tensor_values(r, xi, &mut vals[..n]);
                for m in 0..n {
                    block[m] += w * fx * vals[m];
                }
            }
        }
    }

    /// Truncate every element to order max(r_E - 1, floor): the exact L2
    /// projection into the lower-order space. Mode 0 is retained, so element
    /// means are preserved exactly.
    pub fn project_to_lower_order(&self, floor: u8) -> DgFunction {
        let space = &self.space;
        let new_orders: Vec<u8> = space
            .orders
            .iter()
            .map(|&r| r.saturating_sub(1).max(floor))
            .collect();
        let new_space = Arc::new(DgSpace::new(
            space.mesh.clone(),
            new_orders,
            space.n_fields,
        ));
        let mut out = DgFunction::zeros(new_space);
        for e in 0..space.n_elements() {
            for field in 0..space.n_fields {
                copy_resize(
                    self.field_block(e, field),
                    space.order(e),
                    out.space.order(e),
                    {
                        let o = out.space.field_offset(e, field);
                        let bs = out.space.block_size(e);
                        &mut out.coeffs[o..o + bs]
                    },
                );
            }
        }
        out
    }
}

/// Copy a modal block between orders: truncation drops high tensor modes,
/// padding appends zeros.
fn copy_resize(src: &[f64], r_src: u8, r_dst: u8, dst: &mut [f64]) {
    let ns = r_src as usize + 1;
    let nd = r_dst as usize + 1;
    dst.fill(0.0);
    let keep = ns.min(nd);
    for a in 0..keep {
        for b in 0..keep {
            dst[a * nd + b] = src[a * ns + b];
        }
    }
}

/// 1D transfer matrix M[a][b] = int phi_a(x) phi_b((x + off)/2) dx mapping a
/// parent-side expansion (degree r_src) to child coefficients (degree r_dst).
fn transfer_matrix_1d(r_dst: u8, r_src: u8, off: f64) -> Vec<f64> {
    let nd = r_dst as usize + 1;
    let ns = r_src as usize + 1;
    let rule = QuadratureRule::with_degree(r_dst as usize + r_src as usize + 1);
    let mut m = vec![0.0; nd * ns];
    let mut pa = [0.0f64; 8];
    let mut pb = [0.0f64; 8];
    for (&x, &w) in rule.points.iter().zip(&rule.weights) {
        basis::legendre_1d(r_dst, x, &mut pa, None, None);
        basis::legendre_1d(r_src, 0.5 * (x + off), &mut pb, None, None);
        for a in 0..nd {
            for b in 0..ns {
                m[a * ns + b] += w * pa[a] * pb[b];
            }
        }
    }
    m
}

/// Child offsets in the order of `CellKey::children`: (west/east, south/north).
const CHILD_OFFSETS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];

/// Transfer a function onto the space built after a mesh adaptation.
///
/// Prolongation to children re-expands the parent polynomial exactly;
/// restriction to a parent is the L2 projection of the four child
/// polynomials. Both conserve the field integral.
pub fn transfer_on_adapt(u: &DgFunction, new_space: &Arc<DgSpace>) -> DgFunction {
    let old_space = &u.space;
    let old_mesh = &old_space.mesh;
    assert_eq!(old_space.n_fields, new_space.n_fields);
    let mut out = DgFunction::zeros(new_space.clone());

    for e_new in 0..new_space.n_elements() {
        let key = new_space.mesh.element(e_new).key;
        let r_new = new_space.order(e_new);
        let nd = r_new as usize + 1;
        if let Some(e_old) = old_mesh.element_id(key) {
            for field in 0..new_space.n_fields {
                let o = new_space.field_offset(e_new, field);
                let bs = new_space.block_size(e_new);
                copy_resize(
                    u.field_block(e_old, field),
                    old_space.order(e_old),
                    r_new,
                    &mut out.coeffs[o..o + bs],
                );
            }
        } else if let Some(e_old) = key.parent().and_then(|p| old_mesh.element_id(p)) {
            let r_old = old_space.order(e_old);
            let ns = r_old as usize + 1;
            let child_idx = ((key.i % 2) + 2 * (key.j % 2)) as usize;
            let off = CHILD_OFFSETS[child_idx];
            let mx = transfer_matrix_1d(r_new, r_old, off[0]);
            let my = transfer_matrix_1d(r_new, r_old, off[1]);
            for field in 0..new_space.n_fields {
                let src = u.field_block(e_old, field);
                let o = new_space.field_offset(e_new, field);
                for a1 in 0..nd {
                    for a2 in 0..nd {
                        let mut acc = 0.0;
                        for b1 in 0..ns {
                            for b2 in 0..ns {
                                acc += mx[a1 * ns + b1] * my[a2 * ns + b2] * src[b1 * ns + b2];
                            }
                        }
                        out.coeffs[o + a1 * nd + a2] = acc;
                    }
                }
            }
        } else {
            // Restriction: gather the four old children.
            for (c, child) in key.children().into_iter().enumerate() {
                let e_old = old_mesh
                    .element_id(child)
                    .expect("coarsened leaf must have four old children");
                let r_old = old_space.order(e_old);
                let ns = r_old as usize + 1;
                let off = CHILD_OFFSETS[c];
                let mx = transfer_matrix_1d(r_old, r_new, off[0]);
                let my = transfer_matrix_1d(r_old, r_new, off[1]);
                for field in 0..new_space.n_fields {
                    let src = u.field_block(e_old, field);
                    let o = new_space.field_offset(e_new, field);
                    for b1 in 0..nd {
                        for b2 in 0..nd {
                            let mut acc = 0.0;
                            for a1 in 0..ns {
                                for a2 in 0..ns {
                                    acc +=
                                        mx[a1 * nd + b1] * my[a2 * nd + b2] * src[a1 * ns + a2];
                                }
                            }
                            out.coeffs[o + b1 * nd + b2] += 0.25 * acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Orders for the space on an adapted mesh: children inherit the parent's
/// order, a restored parent takes the maximum of its four children.
pub fn orders_after_adapt(old_space: &DgSpace, new_mesh: &Mesh) -> Vec<u8> {
    let old_mesh = &old_space.mesh;
    (0..new_mesh.n_elements())
        .map(|e| {
            let key = new_mesh.element(e).key;
            if let Some(e_old) = old_mesh.element_id(key) {
                old_space.order(e_old)
            } else if let Some(parent) = key.parent().and_then(|p| old_mesh.element_id(p)) {
                old_space.order(parent)
            } else {
                key.children()
                    .into_iter()
                    .filter_map(|c| old_mesh.element_id(c))
                    .map(|id| old_space.order(id))
                    .max()
                    .expect("new leaf without relation to the old mesh")
            }
        })
        .collect()
}
