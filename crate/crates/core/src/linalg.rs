//! Small dense factorizations: LDLᵀ Cholesky for the ADMM Gram systems and a
//! one-sided Jacobi SVD for NNDSVD initialization.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Square-root-free Cholesky factorization `A = L D Lᵀ` with `L` unit lower
/// triangular and `D` positive diagonal. Avoiding square roots keeps small
/// integer systems exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    unit_lower: DenseMatrix,
    diag: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dims("cholesky", format!("{}x{} is not square", n, a.cols())));
        }
        let scale = a.max_abs().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (a.get(i, j) - a.get(j, i)).abs() > 1e-10 * scale {
                    return Err(Error::NotSpd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let mut l = DenseMatrix::identity(n);
        let mut diag = vec![0.0; n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k) * diag[k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotSpd(format!("pivot {j} is {d:e}")));
            }
            diag[j] = d;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k) * diag[k];
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Self { unit_lower: l, diag })
    }

    pub fn unit_lower(&self) -> &DenseMatrix {
        &self.unit_lower
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::dims("cholesky solve", format!("rhs has {} rows, need {n}", b.rows())));
        }
        let l = &self.unit_lower;
        let mut x = b.clone();
        for c in 0..b.cols() {
            // L y = b
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s -= l.get(i, k) * x.get(k, c);
                }
                x.set(i, c, s);
            }
            // D Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x.get(i, c) / self.diag[i];
                for k in i + 1..n {
                    s -= l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s);
            }
        }
        Ok(x)
    }
}

/// Thin SVD `A = U diag(σ) Vᵀ` with singular values sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    /// m×k, columns are left singular vectors.
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    /// n×k, columns are right singular vectors.
    pub v: DenseMatrix,
}

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOL: f64 = 1e-12;

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(a: &DenseMatrix) -> Result<Svd> {
    if a.rows() < a.cols() {
        let t = jacobi_svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let (m, n) = a.shape();
    // column-major working copies
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut off = 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if off <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            off,
        });
    }

    let mut triplets: Vec<(f64, usize)> = u
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    triplets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u_out = DenseMatrix::zeros(m, n);
    let mut v_out = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &(s, j)) in triplets.iter().enumerate() {
        sigma.push(s);
        for i in 0..m {
            u_out.set(i, k, if s > 0.0 { u[j][i] / s } else { 0.0 });
        }
        for i in 0..n {
            v_out.set(i, k, v[j][i]);
        }
    }
    Ok(Svd {
        u: u_out,
        sigma,
        v: v_out,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
