//! Sparse linear algebra over element-block matrices and Newton's method.
//!
//! The Jacobian of a DG discretization couples each element block to itself
//! and its face neighbors only; the matrix stores dense blocks in a block-CSR
//! layout. Large systems are solved by restarted GMRES with a block-ILU(0)
//! preconditioner, small ones by a sparse direct LU.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::CoreError;

/// Dof layout of a block vector: a contiguous block per element.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    pub n: usize,
}

impl BlockLayout {
    pub fn new(sizes: Vec<usize>) -> BlockLayout {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        BlockLayout {
            sizes,
            offsets,
            n: acc,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }
}

/// Block-sparse matrix in block-CSR form with sorted column ids per row.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    pub layout: Arc<BlockLayout>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    data_ptr: Vec<usize>,
    pub values: Vec<f64>,
}

impl BlockMatrix {
    /// Pattern: diagonal block plus the given neighbor lists.
    pub fn new(layout: Arc<BlockLayout>, neighbors: &[Vec<usize>]) -> BlockMatrix {
        let nb = layout.n_blocks();
        assert_eq!(neighbors.len(), nb);
        let mut row_ptr = Vec::with_capacity(nb + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (r, neigh) in neighbors.iter().enumerate() {
            let mut cols: Vec<usize> = neigh.iter().copied().filter(|&c| c != r).collect();
            cols.push(r);
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend_from_slice(&cols);
            row_ptr.push(col_idx.len());
        }
        let mut data_ptr = Vec::with_capacity(col_idx.len() + 1);
        let mut acc = 0usize;
        for r in 0..nb {
            for k in row_ptr[r]..row_ptr[r + 1] {
                data_ptr.push(acc);
                acc += layout.sizes[r] * layout.sizes[col_idx[k]];
            }
        }
        data_ptr.push(acc);
        BlockMatrix {
            layout,
            row_ptr,
            col_idx,
            data_ptr,
            values: vec![0.0; acc],
        }
    }

    pub fn n(&self) -> usize {
        self.layout.n
    }

    pub fn zero_values(&mut self) {
        self.values.fill(0.0);
    }

    fn block_slot(&self, r: usize, c: usize) -> Option<usize> {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi].binary_search(&c).ok().map(|k| lo + k)
    }

    /// Add a dense row-major block (sizes[r] x sizes[c]).
    pub fn add_block(&mut self, r: usize, c: usize, block: &[f64]) {
        let slot = self
            .block_slot(r, c)
            .unwrap_or_else(|| panic!("block ({r}, {c}) outside the sparsity pattern"));
        let dst = self.data_ptr[slot];
        debug_assert_eq!(block.len(), self.layout.sizes[r] * self.layout.sizes[c]);
        for (d, s) in self.values[dst..dst + block.len()].iter_mut().zip(block) {
            *d += s;
        }
    }

    /// Replace one scalar row of the block row `r` by a unit diagonal row.
    pub fn set_unit_row(&mut self, r: usize, local_row: usize) {
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            let c = self.col_idx[k];
            let cs = self.layout.sizes[c];
            let base = self.data_ptr[k] + local_row * cs;
            for (j, v) in self.values[base..base + cs].iter_mut().enumerate() {
                *v = if c == r && j == local_row { 1.0 } else { 0.0 };
            }
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for r in 0..self.layout.n_blocks() {
            let rs = self.layout.sizes[r];
            let ro = self.layout.offsets[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let cs = self.layout.sizes[c];
                let co = self.layout.offsets[c];
                let block = &self.values[self.data_ptr[k]..self.data_ptr[k] + rs * cs];
                for i in 0..rs {
                    let mut acc = 0.0;
                    let row = &block[i * cs..(i + 1) * cs];
                    for j in 0..cs {
                        acc += row[j] * x[co + j];
                    }
                    y[ro + i] += acc;
                }
            }
        }
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, CoreError> {
        let mut trips = Vec::with_capacity(self.values.len());
        for r in 0..self.layout.n_blocks() {
            let rs = self.layout.sizes[r];
            let ro = self.layout.offsets[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let cs = self.layout.sizes[c];
                let co = self.layout.offsets[c];
                let block = &self.values[self.data_ptr[k]..self.data_ptr[k] + rs * cs];
                for i in 0..rs {
                    for j in 0..cs {
                        trips.push(Triplet::new(ro + i, co + j, block[i * cs + j]));
                    }
                }
            }
        }
        SparseColMat::try_new_from_triplets(self.n(), self.n(), &trips)
            .map_err(|e| CoreError::LinearSolver {
                reason: format!("sparse assembly failed: {e:?}"),
                achieved: f64::NAN,
            })
    }

    /// Iterate blocks of one row: (col, dense row-major block).
    pub fn row_blocks(&self, r: usize) -> impl Iterator<Item = (usize, &[f64])> {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| {
            let c = self.col_idx[k];
            let len = self.layout.sizes[r] * self.layout.sizes[c];
            (c, &self.values[self.data_ptr[k]..self.data_ptr[k] + len])
        })
    }
}

// Dense helpers for block kernels (row-major).

fn dense_lu_factor(a: &mut [f64], piv: &mut [usize], n: usize) -> Result<(), ()> {
    for k in 0..n {
        let mut p = k;
        let mut max = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > max {
                max = v;
                p = i;
            }
        }
        if max == 0.0 {
            return Err(());
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
        }
        let pivot = a[k * n + k];
        for i in (k + 1)..n {
            let l = a[i * n + k] / pivot;
            a[i * n + k] = l;
            for j in (k + 1)..n {
                a[i * n + j] -= l * a[k * n + j];
            }
        }
    }
    Ok(())
}

fn dense_lu_solve(a: &[f64], piv: &[usize], n: usize, x: &mut [f64]) {
    for k in 0..n {
        x.swap(k, piv[k]);
        for i in (k + 1)..n {
            x[i] -= a[i * n + k] * x[k];
        }
    }
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            x[i] -= a[i * n + j] * x[j];
        }
        x[i] /= a[i * n + i];
    }
}

/// Explicit inverse via the pivoted LU factors.
fn dense_invert(a: &[f64], piv: &[usize], n: usize, inv: &mut [f64]) {
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.fill(0.0);
        col[j] = 1.0;
        dense_lu_solve(a, piv, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
}

/// c -= a * b, all row-major (ra x ca) * (ca x cb).
fn dense_gemm_sub(c: &mut [f64], a: &[f64], b: &[f64], ra: usize, ca: usize, cb: usize) {
    for i in 0..ra {
        for k in 0..ca {
            let aik = a[i * ca + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * cb..(k + 1) * cb];
            let crow = &mut c[i * cb..(i + 1) * cb];
            for j in 0..cb {
                crow[j] -= aik * brow[j];
            }
        }
    }
}

/// Block ILU(0): incomplete factorization on the block sparsity pattern with
/// explicitly inverted diagonal blocks.
pub struct BlockIlu {
    layout: Arc<BlockLayout>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    data_ptr: Vec<usize>,
    values: Vec<f64>,
    diag_inv: Vec<f64>,
    diag_inv_ptr: Vec<usize>,
}

impl BlockIlu {
    pub fn factor(m: &BlockMatrix) -> Result<BlockIlu, CoreError> {
        let layout = m.layout.clone();
        let nb = layout.n_blocks();
        let mut values = m.values.clone();
        let row_ptr = m.row_ptr.clone();
        let col_idx = m.col_idx.clone();
        let data_ptr = m.data_ptr.clone();

        let mut diag_inv_ptr = Vec::with_capacity(nb + 1);
        let mut acc = 0;
        for r in 0..nb {
            diag_inv_ptr.push(acc);
            acc += layout.sizes[r] * layout.sizes[r];
        }
        diag_inv_ptr.push(acc);
        let mut diag_inv = vec![0.0; acc];

        let slot = |r: usize, c: usize| -> Option<usize> {
            let lo = row_ptr[r];
            let hi = row_ptr[r + 1];
            col_idx[lo..hi].binary_search(&c).ok().map(|k| lo + k)
        };

        let mut scratch = vec![0.0f64; 64 * 64];
        let mut piv = vec![0usize; 64];
        for r in 0..nb {
            let rs = layout.sizes[r];
            // Eliminate with already-factored rows k < r in the pattern.
            for k_slot in row_ptr[r]..row_ptr[r + 1] {
                let k = col_idx[k_slot];
                if k >= r {
                    break;
                }
                let ks = layout.sizes[k];
                // L_rk = A_rk * inv(A_kk)
                let inv_k = &diag_inv[diag_inv_ptr[k]..diag_inv_ptr[k + 1]];
                let a_rk =
                    values[data_ptr[k_slot]..data_ptr[k_slot] + rs * ks].to_vec();
                {
                    let dst = &mut values[data_ptr[k_slot]..data_ptr[k_slot] + rs * ks];
                    dst.fill(0.0);
                    for i in 0..rs {
                        for t in 0..ks {
                            let v = a_rk[i * ks + t];
                            if v == 0.0 {
                                continue;
                            }
                            for j in 0..ks {
                                dst[i * ks + j] += v * inv_k[t * ks + j];
                            }
                        }
                    }
                }
                // A_rj -= L_rk * A_kj for j in pattern(r), j > k, (k, j) in pattern(k).
                let l_rk =
                    values[data_ptr[k_slot]..data_ptr[k_slot] + rs * ks].to_vec();
                for j_slot in row_ptr[r]..row_ptr[r + 1] {
                    let j = col_idx[j_slot];
                    if j <= k {
                        continue;
                    }
                    if let Some(kj_slot) = slot(k, j) {
                        let js = layout.sizes[j];
                        let a_kj =
                            values[data_ptr[kj_slot]..data_ptr[kj_slot] + ks * js].to_vec();
                        let dst =
                            &mut values[data_ptr[j_slot]..data_ptr[j_slot] + rs * js];
                        dense_gemm_sub(dst, &l_rk, &a_kj, rs, ks, js);
                    }
                }
            }
            // Factor and invert the diagonal block.
            let d_slot = slot(r, r).expect("diagonal block present");
            scratch[..rs * rs]
                .copy_from_slice(&values[data_ptr[d_slot]..data_ptr[d_slot] + rs * rs]);
            if dense_lu_factor(&mut scratch[..rs * rs], &mut piv[..rs], rs).is_err() {
                return Err(CoreError::LinearSolver {
                    reason: format!("singular diagonal block {r} in ILU(0)"),
                    achieved: f64::NAN,
                });
            }
            let inv = &mut diag_inv[diag_inv_ptr[r]..diag_inv_ptr[r + 1]];
            dense_invert(&scratch[..rs * rs], &piv[..rs], rs, inv);
        }

        Ok(BlockIlu {
            layout,
            row_ptr,
            col_idx,
            data_ptr,
            values,
            diag_inv,
            diag_inv_ptr,
        })
    }

    /// z = M^{-1} r.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let nb = self.layout.n_blocks();
        z.copy_from_slice(r);
        // Forward: y_i = r_i - sum_{k<i} L_ik y_k.
        for i in 0..nb {
            let is = self.layout.sizes[i];
            let io = self.layout.offsets[i];
            for k_slot in self.row_ptr[i]..self.row_ptr[i + 1] {
                let k = self.col_idx[k_slot];
                if k >= i {
                    break;
                }
                let ks = self.layout.sizes[k];
                let ko = self.layout.offsets[k];
                let block = &self.values[self.data_ptr[k_slot]..self.data_ptr[k_slot] + is * ks];
                for a in 0..is {
                    let mut acc = 0.0;
                    for b in 0..ks {
                        acc += block[a * ks + b] * z[ko + b];
                    }
                    z[io + a] -= acc;
                }
            }
        }
        // Backward: z_i = inv(A_ii) (y_i - sum_{j>i} A_ij z_j).
        let mut tmp = vec![0.0f64; 64];
        for i in (0..nb).rev() {
            let is = self.layout.sizes[i];
            let io = self.layout.offsets[i];
            for j_slot in (self.row_ptr[i]..self.row_ptr[i + 1]).rev() {
                let j = self.col_idx[j_slot];
                if j <= i {
                    break;
                }
                let js = self.layout.sizes[j];
                let jo = self.layout.offsets[j];
                let block = &self.values[self.data_ptr[j_slot]..self.data_ptr[j_slot] + is * js];
                for a in 0..is {
                    let mut acc = 0.0;
                    for b in 0..js {
                        acc += block[a * js + b] * z[jo + b];
                    }
                    z[io + a] -= acc;
                }
            }
            let inv = &self.diag_inv[self.diag_inv_ptr[i]..self.diag_inv_ptr[i + 1]];
            tmp[..is].copy_from_slice(&z[io..io + is]);
            for a in 0..is {
                let mut acc = 0.0;
                for b in 0..is {
                    acc += inv[a * is + b] * tmp[b];
                }
                z[io + a] = acc;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearConfig {
    /// Relative residual target.
    pub rtol: f64,
    pub restart: usize,
    pub max_iters: usize,
    /// Systems at most this large go to the sparse direct solver.
    pub direct_threshold: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            rtol: 1e-9,
            restart: 100,
            max_iters: 2000,
            direct_threshold: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LinearStats {
    pub iterations: usize,
    pub relative_residual: f64,
    pub direct: bool,
}

/// Solve `matrix * x = rhs`: sparse direct LU below the dimension threshold,
/// otherwise restarted GMRES right-preconditioned by block ILU(0).
pub fn linear_solve(
    matrix: &BlockMatrix,
    rhs: &[f64],
    cfg: &LinearConfig,
) -> Result<(Vec<f64>, LinearStats), CoreError> {
    assert_eq!(rhs.len(), matrix.n());
    let bnorm = norm(rhs);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; rhs.len()],
            LinearStats {
                direct: true,
                ..LinearStats::default()
            },
        ));
    }
    if matrix.n() <= cfg.direct_threshold {
        direct_solve(matrix, rhs, bnorm)
    } else {
        gmres_solve(matrix, rhs, bnorm, cfg)
    }
}

fn direct_solve(
    matrix: &BlockMatrix,
    rhs: &[f64],
    bnorm: f64,
) -> Result<(Vec<f64>, LinearStats), CoreError> {
    faer::set_global_parallelism(faer::Par::Seq);
    let a = matrix.to_faer()?;
    let lu = a.sp_lu().map_err(|e| CoreError::LinearSolver {
        reason: format!("sparse LU failed: {e:?}"),
        achieved: f64::NAN,
    })?;
    let mut b = faer::Mat::<f64>::zeros(rhs.len(), 1);
    for (i, &v) in rhs.iter().enumerate() {
        b[(i, 0)] = v;
    }
    let x = lu.solve(&b);
    let x: Vec<f64> = (0..rhs.len()).map(|i| x[(i, 0)]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::LinearSolver {
            reason: "direct solve produced non-finite values (singular matrix?)".into(),
            achieved: f64::INFINITY,
        });
    }
    let mut r = vec![0.0; rhs.len()];
    matrix.matvec(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(rhs) {
        *ri -= bi;
    }
    let rel = norm(&r) / bnorm;
    if rel > 1e-6 {
        return Err(CoreError::LinearSolver {
            reason: "direct solve residual too large (singular matrix?)".into(),
            achieved: rel,
        });
    }
    Ok((
        x,
        LinearStats {
            iterations: 0,
            relative_residual: rel,
            direct: true,
        },
    ))
}

fn gmres_solve(
    matrix: &BlockMatrix,
    rhs: &[f64],
    bnorm: f64,
    cfg: &LinearConfig,
) -> Result<(Vec<f64>, LinearStats), CoreError> {
    let ilu = BlockIlu::factor(matrix)?;
    let n = matrix.n();
    let m = cfg.restart.max(2);
    let mut x = vec![0.0; n];
    let mut total_iters = 0usize;
    let mut tmp = vec![0.0; n];
    let mut w = vec![0.0; n];

    loop {
        // r = b - A x
        matrix.matvec(&x, &mut tmp);
        let mut r: Vec<f64> = rhs.iter().zip(&tmp).map(|(b, ax)| b - ax).collect();
        let beta = norm(&r);
        if beta / bnorm <= cfg.rtol {
            return Ok((
                x,
                LinearStats {
                    iterations: total_iters,
                    relative_residual: beta / bnorm,
                    direct: false,
                },
            ));
        }
        if total_iters >= cfg.max_iters {
            return Err(CoreError::LinearSolver {
                reason: format!("GMRES stalled after {total_iters} iterations"),
                achieved: beta / bnorm,
            });
        }
        for v in r.iter_mut() {
            *v /= beta;
        }
        let mut basis_v: Vec<Vec<f64>> = vec![r];
        let mut h: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<f64> = Vec::new();
        let mut sn: Vec<f64> = Vec::new();
        let mut g = vec![beta];
        let mut k_used = 0;

        for k in 0..m {
            if total_iters >= cfg.max_iters {
                break;
            }
            total_iters += 1;
            // w = A M^{-1} v_k
            ilu.apply(&basis_v[k], &mut tmp);
            matrix.matvec(&tmp, &mut w);
            let mut hk = vec![0.0; k + 2];
            for (j, vj) in basis_v.iter().enumerate() {
                let d = dot(&w, vj);
                hk[j] = d;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= d * vi;
                }
            }
            let wn = norm(&w);
            hk[k + 1] = wn;
            // Givens rotations.
            for j in 0..k {
                let t = cs[j] * hk[j] + sn[j] * hk[j + 1];
                hk[j + 1] = -sn[j] * hk[j] + cs[j] * hk[j + 1];
                hk[j] = t;
            }
            let denom = (hk[k] * hk[k] + hk[k + 1] * hk[k + 1]).sqrt();
            let (c, s) = if denom == 0.0 {
                (1.0, 0.0)
            } else {
                (hk[k] / denom, hk[k + 1] / denom)
            };
            cs.push(c);
            sn.push(s);
            hk[k] = c * hk[k] + s * hk[k + 1];
            hk[k + 1] = 0.0;
            g.push(-s * g[k]);
            g[k] *= c;
            h.push(hk);
            k_used = k + 1;
            let res = g[k + 1].abs() / bnorm;
            if res <= cfg.rtol || wn == 0.0 {
                break;
            }
            let mut v = w.clone();
            for vi in v.iter_mut() {
                *vi /= wn;
            }
            basis_v.push(v);
        }

        // Back substitution for y, then x += M^{-1} (V y).
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in (i + 1)..k_used {
                acc -= h[j][i] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        tmp.fill(0.0);
        for (j, yj) in y.iter().enumerate() {
            for (t, v) in tmp.iter_mut().zip(&basis_v[j]) {
                *t += yj * v;
            }
        }
        ilu.apply(&tmp.clone(), &mut tmp);
        for (xi, d) in x.iter_mut().zip(&tmp) {
            *xi += d;
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Residual and Jacobian provider for Newton's method.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;
    fn residual_and_jacobian(&mut self, u: &[f64])
        -> Result<(Vec<f64>, BlockMatrix), CoreError>;
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonConfig {
    pub atol: f64,
    pub rtol: f64,
    pub max_iter: usize,
    pub line_search: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            atol: 1e-10,
            rtol: 1e-8,
            max_iter: 30,
            line_search: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct NewtonStats {
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub linear_iterations: usize,
}

/// Newton failure carrying the last iterate so callers can report it.
#[derive(Debug)]
pub struct NewtonFailure {
    pub last_iterate: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub reason: String,
}

impl From<NewtonFailure> for CoreError {
    fn from(f: NewtonFailure) -> CoreError {
        CoreError::NonlinearFailure {
            iterations: f.iterations,
            reason: f.reason,
            residual: f.residual,
        }
    }
}

/// Full-step Newton iteration: stops when the residual norm drops below
/// `atol` or `rtol` times the initial norm; declares divergence after three
/// consecutive residual increases.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    sys: &mut S,
    u0: &[f64],
    cfg: &NewtonConfig,
    lin: &LinearConfig,
) -> Result<(Vec<f64>, NewtonStats), NewtonFailure> {
    let mut u = u0.to_vec();
    let mut stats = NewtonStats::default();
    let mut last_norm = f64::INFINITY;
    let mut growth_streak = 0usize;

    let fail = |u:&[f64], stats: &NewtonStats, reason: String| NewtonFailure {
        last_iterate: u.to_vec(),
        residual: stats.final_residual,
        iterations: stats.iterations,
        reason,
    };

    loop {
        let (res, jac) = match sys.residual_and_jacobian(&u) {
            Ok(v) => v,
            Err(e) => return Err(fail(&u, &stats, format!("assembly failed: {e}"))),
        };
        let rnorm = norm(&res);
        stats.final_residual = rnorm;
        if stats.iterations == 0 {
            stats.initial_residual = rnorm;
        }
        if !rnorm.is_finite() {
            return Err(fail(&u, &stats, "non-finite residual".into()));
        }
        if rnorm <= cfg.atol || rnorm <= cfg.rtol * stats.initial_residual {
            return Ok((u, stats));
        }
        if rnorm >= last_norm {
            growth_streak += 1;
            if growth_streak >= 3 {
                return Err(fail(
                    &u,
                    &stats,
                    "divergence: residual grew over 3 consecutive steps".into(),
                ));
            }
        } else {
            growth_streak = 0;
        }
        last_norm = rnorm;
        if stats.iterations >= cfg.max_iter {
            return Err(fail(
                &u,
                &stats,
                format!("no convergence within {} iterations", cfg.max_iter),
            ));
        }

        let neg_res: Vec<f64> = res.iter().map(|v| -v).collect();
        let (mut step, lin_stats) = match linear_solve(&jac, &neg_res, lin) {
            Ok(v) => v,
            Err(e) => return Err(fail(&u, &stats, format!("linear solver: {e}"))),
        };
        stats.linear_iterations += lin_stats.iterations;

        if cfg.line_search {
            // Backtracking halving, at most four times.
            let mut lambda = 1.0;
            for _ in 0..4 {
                let trial: Vec<f64> =
                    u.iter().zip(&step).map(|(a, d)| a + lambda * d).collect();
                match sys.residual_and_jacobian(&trial) {
                    Ok((r, _)) if norm(&r) < rnorm => break,
                    _ => lambda *= 0.5,
                }
            }
            for d in step.iter_mut() {
                *d *= lambda;
            }
        }
        for (ui, d) in u.iter_mut().zip(&step) {
            *ui += d;
        }
        stats.iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layout() -> Arc<BlockLayout> {
        Arc::new(BlockLayout::new(vec![1]))
    }

    fn dense2() -> BlockMatrix {
        let layout = Arc::new(BlockLayout::new(vec![2]));
        BlockMatrix::new(layout, &[vec![]])
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let mut m = dense2();
        m.add_block(0, 0, &[1.0, 0.0, 0.0, 1.0]);
        let (x, _) = linear_solve(&m, &[3.0, -2.0], &LinearConfig::default()).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14);
        assert!((x[1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn spd_2x2_solve() {
        let mut m = dense2();
        m.add_block(0, 0, &[2.0, 1.0, 1.0, 2.0]);
        let (x, _) = linear_solve(&m, &[3.0, 3.0], &LinearConfig::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_errors() {
        let m = dense2(); // zero matrix
        assert!(linear_solve(&m, &[1.0, 1.0], &LinearConfig::default()).is_err());
    }

    #[test]
    fn gmres_matches_direct_on_random_block_system() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Block tridiagonal, diagonally dominant.
        let nb = 24;
        let bs = 5;
        let layout = Arc::new(BlockLayout::new(vec![bs; nb]));
        let neighbors: Vec<Vec<usize>> = (0..nb)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < nb {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        let mut m = BlockMatrix::new(layout.clone(), &neighbors);
        for i in 0..nb {
            let mut diag = vec![0.0; bs * bs];
            for a in 0..bs {
                for b in 0..bs {
                    diag[a * bs + b] = rng.gen_range(-0.3..0.3);
                }
                diag[a * bs + a] += 4.0;
            }
            m.add_block(i, i, &diag);
            for j in [i.wrapping_sub(1), i + 1] {
                if j < nb && j != i {
                    let mut off = vec![0.0; bs * bs];
                    for v in off.iter_mut() {
                        *v = rng.gen_range(-0.4..0.4);
                    }
                    m.add_block(i, j, &off);
                }
            }
        }
        let b: Vec<f64> = (0..nb * bs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let direct = linear_solve(&m, &b, &LinearConfig::default()).unwrap().0;
        let mut cfg = LinearConfig::default();
        cfg.direct_threshold = 0; // force GMRES
        cfg.rtol = 1e-12;
        let (x, stats) = linear_solve(&m, &b, &cfg).unwrap();
        assert!(!stats.direct);
        let err: f64 = x
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "gmres vs direct differ by {err}");
    }

    #[test]
    fn set_unit_row_pins_a_dof() {
        let layout = Arc::new(BlockLayout::new(vec![2, 2]));
        let mut m = BlockMatrix::new(layout, &[vec![1], vec![0]]);
        m.add_block(0, 0, &[2.0, 0.5, 0.5, 2.0]);
        m.add_block(1, 1, &[2.0, 0.0, 0.0, 2.0]);
        m.add_block(0, 1, &[0.3, 0.0, 0.1, 0.0]);
        m.add_block(1, 0, &[0.0, 0.2, 0.0, 0.0]);
        m.set_unit_row(0, 0);
        let (x, _) = linear_solve(&m, &[5.0, 0.0, 0.0, 0.0], &LinearConfig::default()).unwrap();
        assert!((x[0] - 5.0).abs() < 1e-12);
    }

    struct Affine;
    impl NonlinearSystem for Affine {
        fn dim(&self) -> usize {
            1
        }
        fn residual_and_jacobian(
            &mut self,
            u: &[f64],
        ) -> Result<(Vec<f64>, BlockMatrix), CoreError> {
            let mut j = BlockMatrix::new(scalar_layout(), &[vec![]]);
            j.add_block(0, 0, &[3.0]);
            Ok((vec![3.0 * u[0] - 6.0], j))
        }
    }

    #[test]
    fn newton_on_affine_converges_in_one_iteration() {
        let (u, stats) = newton_solve(
            &mut Affine,
            &[10.0],
            &NewtonConfig::default(),
            &LinearConfig::default(),
        )
        .unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12);
        assert_eq!(stats.iterations, 1);
    }

    struct Square;
    impl NonlinearSystem for Square {
        fn dim(&self) -> usize {
            1
        }
        fn residual_and_jacobian(
            &mut self,
            u: &[f64],
        ) -> Result<(Vec<f64>, BlockMatrix), CoreError> {
            let mut j = BlockMatrix::new(scalar_layout(), &[vec![]]);
            j.add_block(0, 0, &[2.0 * u[0]]);
            Ok((vec![u[0] * u[0] - 4.0], j))
        }
    }

    #[test]
    fn newton_on_square_root_problem() {
        // First iterate from u0 = 3 is 3 - 5/6; convergence to 2 within 5 its.
        let cfg = NewtonConfig {
            atol: 1e-10,
            ..NewtonConfig::default()
        };
        let mut history = Vec::new();
        struct Tracked<'a>(&'a mut Vec<f64>);
        impl NonlinearSystem for Tracked<'_> {
            fn dim(&self) -> usize {
                1
            }
            fn residual_and_jacobian(
                &mut self,
                u: &[f64],
            ) -> Result<(Vec<f64>, BlockMatrix), CoreError> {
                self.0.push(u[0]);
                let mut j = BlockMatrix::new(scalar_layout(), &[vec![]]);
                j.add_block(0, 0, &[2.0 * u[0]]);
                Ok((vec![u[0] * u[0] - 4.0], j))
            }
        }
        let (u, stats) =
            newton_solve(&mut Tracked(&mut history), &[3.0], &cfg, &LinearConfig::default())
                .unwrap();
        assert!((u[0] - 2.0).abs() < 1e-10);
        assert!(stats.iterations <= 5);
        assert!((history[1] - (3.0 - 5.0 / 6.0)).abs() < 1e-14);
        // Quadratic convergence: e_{k+1} / e_k^2 stays bounded.
        for w in history.windows(2) {
            let e0 = (w[0] - 2.0).abs();
            let e1 = (w[1] - 2.0).abs();
            if e0 > 1e-7 && e1 > 0.0 {
                assert!(e1 / (e0 * e0) < 10.0, "ratio {}", e1 / (e0 * e0));
            }
        }
    }

    struct SingularAtStart;
    impl NonlinearSystem for SingularAtStart {
        fn dim(&self) -> usize {
            1
        }
        fn residual_and_jacobian(
            &mut self,
            u: &[f64],
        ) -> Result<(Vec<f64>, BlockMatrix), CoreError> {
            let mut j = BlockMatrix::new(scalar_layout(), &[vec![]]);
            j.add_block(0, 0, &[2.0 * u[0]]); // zero at u0 = 0
            Ok((vec![u[0] * u[0] - 4.0], j))
        }
    }

    #[test]
    fn singular_jacobian_surfaces_as_failure() {
        let err = newton_solve(
            &mut SingularAtStart,
            &[0.0],
            &NewtonConfig::default(),
            &LinearConfig::default(),
        )
        .unwrap_err();
        assert!(err.reason.contains("linear solver"));
        assert_eq!(err.last_iterate, vec![0.0]);
    }
}
