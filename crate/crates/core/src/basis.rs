//! Hierarchical orthonormal modal basis: normalized Legendre polynomials and
//! their tensor products on the reference square [-1,1]^2.
//!
//! Mode (a, b) of order r is phi_a(xi) * phi_b(eta) with linear index
//! a * (r+1) + b; the basis is orthonormal in L2 of the reference square, so
//! truncating to lower tensor degree is the exact L2 projection.

/// Number of modes of the full tensor space Q_r.
pub fn block_size(order: u8) -> usize {
    let n = order as usize + 1;
    n * n
}

/// Evaluate the 1D normalized Legendre polynomials phi_0..phi_order at `x`,
/// optionally with first and second derivatives.
pub fn legendre_1d(
    order: u8,
    x: f64,
    vals: &mut [f64],
    mut derivs: Option<&mut [f64]>,
    mut second: Option<&mut [f64]>,
) {
    let n = order as usize;
    debug_assert!(vals.len() > n);
    // Unnormalized recurrence, then scale by sqrt(k + 1/2).
    let mut p = [0.0f64; 2];
    let mut dp = [0.0f64; 2];
    let mut d2p = [0.0f64; 2];
    for k in 0..=n {
        let (pk, dpk, d2pk) = if k == 0 {
            (1.0, 0.0, 0.0)
        } else if k == 1 {
            (x, 1.0, 0.0)
        } else {
            let kf = (k - 1) as f64;
            let a = (2.0 * kf + 1.0) / (kf + 1.0);
            let b = kf / (kf + 1.0);
            let pk = a * x * p[1] - b * p[0];
            let dpk = a * (p[1] + x * dp[1]) - b * dp[0];
            let d2pk = a * (2.0 * dp[1] + x * d2p[1]) - b * d2p[0];
            (pk, dpk, d2pk)
        };
        let scale = ((k as f64) + 0.5).sqrt();
        vals[k] = scale * pk;
        if let Some(d) = derivs.as_deref_mut() {
            d[k] = scale * dpk;
        }
        if let Some(d2) = second.as_deref_mut() {
            d2[k] = scale * d2pk;
        }
        p = [p[1], pk];
        dp = [dp[1], dpk];
        d2p = [d2p[1], d2pk];
    }
}

/// Values of all tensor modes at a reference point.
pub fn tensor_values(order: u8, xi: [f64; 2], out: &mut [f64]) {
    let n = order as usize + 1;
    let mut px = [0.0f64; 8];
    let mut py = [0.0f64; 8];
    legendre_1d(order, xi[0], &mut px, None, None);
    legendre_1d(order, xi[1], &mut py, None, None);
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = px[a] * py[b];
        }
    }
}

/// Values and reference gradients (d/dxi, d/deta) of all tensor modes.
pub fn tensor_values_grads(order: u8, xi: [f64; 2], vals: &mut [f64], grads: &mut [[f64; 2]]) {
    let n = order as usize + 1;
    let (mut px, mut py) = ([0.0f64; 8], [0.0f64; 8]);
    let (mut dx, mut dy) = ([0.0f64; 8], [0.0f64; 8]);
    legendre_1d(order, xi[0], &mut px, Some(&mut dx), None);
    legendre_1d(order, xi[1], &mut py, Some(&mut dy), None);
    for a in 0..n {
        for b in 0..n {
            let m = a * n + b;
            vals[m] = px[a] * py[b];
            grads[m] = [dx[a] * py[b], px[a] * dy[b]];
        }
    }
}

/// Values, gradients and reference Hessians (dxx, dxy, dyy) of all modes.
pub fn tensor_values_grads_hessians(
    order: u8,
    xi: [f64; 2],
    vals: &mut [f64],
    grads: &mut [[f64; 2]],
    hessians: &mut [[f64; 3]],
) {
    let n = order as usize + 1;
    let (mut px, mut py) = ([0.0f64; 8], [0.0f64; 8]);
    let (mut dx, mut dy) = ([0.0f64; 8], [0.0f64; 8]);
    let (mut d2x, mut d2y) = ([0.0f64; 8], [0.0f64; 8]);
    legendre_1d(order, xi[0], &mut px, Some(&mut dx), Some(&mut d2x));
    legendre_1d(order, xi[1], &mut py, Some(&mut dy), Some(&mut d2y));
    for a in 0..n {
        for b in 0..n {
            let m = a * n + b;
            vals[m] = px[a] * py[b];
            grads[m] = [dx[a] * py[b], px[a] * dy[b]];
            hessians[m] = [d2x[a] * py[b], dx[a] * dy[b], px[a] * d2y[b]];
        }
    }
}

/// Maximum supported order of the shipped basis evaluation buffers.
pub const MAX_ORDER: u8 = 7;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_legendre;

    #[test]
    fn one_dimensional_orthonormality() {
        let rule = gauss_legendre(6);
        for a in 0..=4u8 {
            for b in 0..=4u8 {
                let mut dot = 0.0;
                for (&x, &w) in rule.points.iter().zip(&rule.weights) {
                    let mut va = [0.0; 8];
                    legendre_1d(4, x, &mut va, None, None);
                    dot += w * va[a as usize] * va[b as usize];
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "a={a} b={b} dot={dot}");
            }
        }
    }

    #[test]
    fn tensor_mass_matrix_is_identity() {
        for order in 1..=3u8 {
            let n = block_size(order);
            let rule = gauss_legendre(order as usize + 1).tensor_square();
            let mut mass = vec![0.0; n * n];
            let mut vals = vec![0.0; n];
            for &(xi, w) in &rule {
                tensor_values(order, xi, &mut vals);
                for i in 0..n {
                    for j in 0..n {
                        mass[i * n + j] += w * vals[i] * vals[j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (mass[i * n + j] - expect).abs() < 1e-12,
                        "order {order}: M[{i},{j}] = {}",
                        mass[i * n + j]
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let order = 3u8;
        let n = block_size(order);
        let x = [0.3, -0.7];
        let h = 1e-6;
        let mut vals = vec![0.0; n];
        let mut grads = vec![[0.0; 2]; n];
        tensor_values_grads(order, x, &mut vals, &mut grads);
        for dim in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[dim] += h;
            xm[dim] -= h;
            let mut vp = vec![0.0; n];
            let mut vm = vec![0.0; n];
            tensor_values(order, xp, &mut vp);
            tensor_values(order, xm, &mut vm);
            for m in 0..n {
                let fd = (vp[m] - vm[m]) / (2.0 * h);
                assert!((grads[m][dim] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn hessians_match_finite_differences() {
        let order = 3u8;
        let n = block_size(order);
        let x = [0.15, 0.45];
        let h = 1e-5;
        let mut vals = vec![0.0; n];
        let mut grads = vec![[0.0; 2]; n];
        let mut hess = vec![[0.0; 3]; n];
        tensor_values_grads_hessians(order, x, &mut vals, &mut grads, &mut hess);
        let eval = |p: [f64; 2]| {
            let mut v = vec![0.0; n];
            tensor_values(order, p, &mut v);
            v
        };
        let vpp = eval([x[0] + h, x[1] + h]);
        let vpm = eval([x[0] + h, x[1] - h]);
        let vmp = eval([x[0] - h, x[1] + h]);
        let vmm = eval([x[0] - h, x[1] - h]);
        let vp0 = eval([x[0] + h, x[1]]);
        let vm0 = eval([x[0] - h, x[1]]);
        let v0p = eval([x[0], x[1] + h]);
        let v0m = eval([x[0], x[1] - h]);
        for m in 0..n {
            let dxx = (vp0[m] - 2.0 * vals[m] + vm0[m]) / (h * h);
            let dyy = (v0p[m] - 2.0 * vals[m] + v0m[m]) / (h * h);
            let dxy = (vpp[m] - vpm[m] - vmp[m] + vmm[m]) / (4.0 * h * h);
            assert!((hess[m][0] - dxx).abs() < 1e-4);
            assert!((hess[m][1] - dxy).abs() < 1e-4);
            assert!((hess[m][2] - dyy).abs() < 1e-4);
        }
    }
}
