//! Kronecker products, Kronecker sums and the composite service/orbit operator
//! families that every generator block is assembled from.
//!
//! Operators act on tensor-product phase spaces ordered slowest-to-fastest as
//! (arrival phase, handoff service phases, new-call service phases, orbit
//! phases); see [`crate::state`] for the ordering contract. Empty constructs
//! (arity 0) are 1x1 zero matrices so the block formulas specialize without
//! case splits.

use crate::error::{Error, Result};
use crate::model::{PhaseType, RetrialPh};

/// Dense carrier for every operator in the crate.
pub type Matrix = nalgebra::DMatrix<f64>;

/// Default cap on entries of a single dense operator. Exceeding it is a loud
/// [`Error::DimensionCap`], not a slow death by swapping.
pub const DEFAULT_ENTRY_CAP: usize = 2_000_000;

pub(crate) fn check_cap(what: &str, rows: usize, cols: usize, cap: usize) -> Result<()> {
    match rows.checked_mul(cols) {
        Some(n) if n <= cap => Ok(()),
        _ => Err(Error::DimensionCap {
            what: what.to_string(),
            rows,
            cols,
            cap,
        }),
    }
}

/// Kronecker product `a (x) b`, dims `(ra*rb) x (ca*cb)`.
pub fn kron_product(a: &Matrix, b: &Matrix, cap: usize) -> Result<Matrix> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let rows = ra
        .checked_mul(rb)
        .ok_or_else(|| cap_overflow("kron product rows", cap))?;
    let cols = ca
        .checked_mul(cb)
        .ok_or_else(|| cap_overflow("kron product cols", cap))?;
    check_cap("kron product", rows, cols, cap)?;
    let mut out = Matrix::zeros(rows, cols);
    for ia in 0..ra {
        for ja in 0..ca {
            let v = a[(ia, ja)];
            if v == 0.0 {
                continue;
            }
            for ib in 0..rb {
                for jb in 0..cb {
                    out[(ia * rb + ib, ja * cb + jb)] = v * b[(ib, jb)];
                }
            }
        }
    }
    Ok(out)
}

fn cap_overflow(what: &str, cap: usize) -> Error {
    Error::DimensionCap {
        what: what.to_string(),
        rows: usize::MAX,
        cols: 1,
        cap,
    }
}

/// Kronecker sum `a (+) b = a (x) I + I (x) b` for square `a`, `b`.
pub fn kron_sum(a: &Matrix, b: &Matrix, cap: usize) -> Result<Matrix> {
    if !a.is_square() || !b.is_square() {
        return Err(Error::InvalidArgument(format!(
            "kron sum needs square inputs, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let n = a.nrows();
    let m = b.nrows();
    let dim = n
        .checked_mul(m)
        .ok_or_else(|| cap_overflow("kron sum", cap))?;
    check_cap("kron sum", dim, dim, cap)?;
    let mut out = Matrix::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            if v == 0.0 {
                continue;
            }
            for k in 0..m {
                out[(i * m + k, j * m + k)] += v;
            }
        }
    }
    for i in 0..n {
        for k in 0..m {
            for l in 0..m {
                out[(i * m + k, i * m + l)] += b[(k, l)];
            }
        }
    }
    Ok(out)
}

/// `arity`-fold Kronecker sum of a square matrix; arity 0 is the 1x1 zero.
pub fn kron_sum_power(a: &Matrix, arity: usize, cap: usize) -> Result<Matrix> {
    let mut acc = Matrix::zeros(1, 1);
    for _ in 0..arity {
        acc = kron_sum(&acc, a, cap)?;
    }
    Ok(acc)
}

/// Phase evolution of `k` concurrent services of one class: the `k`-fold
/// Kronecker sum of the service sub-generator.
pub fn psi_service(p: &PhaseType, k: usize, cap: usize) -> Result<Matrix> {
    kron_sum_power(&p.transition, k, cap)
}

/// Phase evolution of `l` orbiting customers: `l`-fold Kronecker sum of the
/// retrial sub-generator.
pub fn psi_orbit(r: &RetrialPh, l: usize, cap: usize) -> Result<Matrix> {
    kron_sum_power(&r.transition, l, cap)
}

/// Unsuccessful retrial attempts of `l` orbiting customers: each customer may
/// fire its retry exit and, finding no idle channel, restart its retrial clock
/// in a fresh initial phase. The per-customer operator is the rank-one matrix
/// `exit_retry * gamma`.
pub fn psi_orbit_failed(r: &RetrialPh, l: usize, cap: usize) -> Result<Matrix> {
    let n = r.phases();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d[(i, j)] = r.exit_retry[i] * r.gamma[j];
        }
    }
    kron_sum_power(&d, l, cap)
}

/// Sum over positions of a single-coordinate exit: maps `alphabet^arity` row
/// states to `alphabet^(arity-1)` column states, erasing the exiting
/// coordinate and weighting by its exit rate.
fn position_exit_sum(alphabet: usize, arity: usize, exit: &[f64], what: &str, cap: usize) -> Result<Matrix> {
    assert!(arity >= 1);
    let rows = checked_pow(alphabet, arity, what, cap)?;
    let cols = checked_pow(alphabet, arity - 1, what, cap)?;
    check_cap(what, rows, cols, cap)?;
    let mut out = Matrix::zeros(rows, cols);
    for y in 0..arity {
        let pre = checked_pow(alphabet, y, what, cap)?;
        let post = checked_pow(alphabet, arity - 1 - y, what, cap)?;
        for ipre in 0..pre {
            for c in 0..alphabet {
                let w = exit[c];
                if w == 0.0 {
                    continue;
                }
                for ipost in 0..post {
                    let row = (ipre * alphabet + c) * post + ipost;
                    let col = ipre * post + ipost;
                    out[(row, col)] += w;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn checked_pow(base: usize, exp: usize, what: &str, cap: usize) -> Result<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc
            .checked_mul(base)
            .filter(|&n| n <= cap.max(1))
            .ok_or_else(|| Error::DimensionCap {
                what: what.to_string(),
                rows: usize::MAX,
                cols: 1,
                cap,
            })?;
    }
    Ok(acc)
}

/// Completion of any one of `k` concurrent services: dims `M^k x M^(k-1)`.
pub fn phi_service(p: &PhaseType, k: usize, cap: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "phi_service needs at least one service in progress".into(),
        ));
    }
    position_exit_sum(p.phases(), k, &p.exit, "service completion operator", cap)
}

/// Abandonment of any one of `arity` orbiting customers (leave exit): the
/// departing coordinate is erased. Dims `N^arity x N^(arity-1)`.
pub fn phi_orbit_leave(r: &RetrialPh, arity: usize, cap: usize) -> Result<Matrix> {
    if arity == 0 {
        return Err(Error::InvalidArgument(
            "phi_orbit_leave needs a nonempty orbit".into(),
        ));
    }
    position_exit_sum(r.phases(), arity, &r.exit_leave, "orbit leave operator", cap)
}

/// Successful retrial of any one of `arity` orbiting customers: the customer
/// fires its retry exit and starts a new-call service in a fresh phase drawn
/// from `beta_new`. Columns are indexed with the freshly started service phase
/// slowest, then the surviving orbit coordinates: dims `N^arity x (Mn * N^(arity-1))`.
/// The service-phase factor sits just before the orbit factor in the state
/// ordering, so the caller can prefix plain identities.
pub fn phi_orbit_success(r: &RetrialPh, beta_new: &[f64], arity: usize, cap: usize) -> Result<Matrix> {
    if arity == 0 {
        return Err(Error::InvalidArgument(
            "phi_orbit_success needs a nonempty orbit".into(),
        ));
    }
    let n = r.phases();
    let mn = beta_new.len();
    let rows = checked_pow(n, arity, "orbit success operator", cap)?;
    let orbit_cols = checked_pow(n, arity - 1, "orbit success operator", cap)?;
    let cols = mn
        .checked_mul(orbit_cols)
        .ok_or_else(|| cap_overflow("orbit success operator", cap))?;
    check_cap("orbit success operator", rows, cols, cap)?;
    let mut out = Matrix::zeros(rows, cols);
    for y in 0..arity {
        let pre = checked_pow(n, y, "orbit success operator", cap)?;
        let post = checked_pow(n, arity - 1 - y, "orbit success operator", cap)?;
        for ipre in 0..pre {
            for c in 0..n {
                let w = r.exit_retry[c];
                if w == 0.0 {
                    continue;
                }
                for ipost in 0..post {
                    let row = (ipre * n + c) * post + ipost;
                    let surviving = ipre * post + ipost;
                    for (m, &b) in beta_new.iter().enumerate() {
                        if b == 0.0 {
                            continue;
                        }
                        out[(row, m * orbit_cols + surviving)] += w * b;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Row-major construction helper.
pub fn from_rows(rows: &[Vec<f64>]) -> Matrix {
    let r = rows.len();
    let c = if r == 0 { 0 } else { rows[0].len() };
    Matrix::from_fn(r, c, |i, j| rows[i][j])
}

/// 1 x n row matrix from a slice.
pub fn row(v: &[f64]) -> Matrix {
    Matrix::from_fn(1, v.len(), |_, j| v[j])
}

/// n x 1 column matrix from a slice.
pub fn col(v: &[f64]) -> Matrix {
    Matrix::from_fn(v.len(), 1, |i, _| v[i])
}
