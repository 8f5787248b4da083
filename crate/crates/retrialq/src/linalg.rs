//! Small dense linear-algebra helpers shared by the model and solver layers.

use crate::error::{Error, Result};
use crate::kron::Matrix;

/// Left null vector of `b`, normalized to sum 1, entries clamped to `>= 0`.
///
/// Solves `x b = 0` by replacing one balance equation with the normalization
/// `x e = 1` and LU-solving the square system; candidate equations are tried
/// until the full residual certifies the answer. Intended for matrices whose
/// left null space is one-dimensional and nonnegative (censored-chain
/// generators and the like).
pub(crate) fn left_null_vector(b: &Matrix, residual_tol: f64, context: &str) -> Result<Vec<f64>> {
    let n = b.nrows();
    if n == 0 || b.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "{context}: left_null_vector needs a nonempty square matrix"
        )));
    }

    // Uniqueness guard: more than one vanishing pivot means the chain splits.
    let scale = b.amax().max(f64::MIN_POSITIVE);
    let lu = b.transpose().lu();
    let tiny = lu
        .u()
        .diagonal()
        .iter()
        .filter(|d| d.abs() <= 1e-10 * scale)
        .count();
    if tiny >= 2 {
        return Err(Error::Irreducible {
            context: format!("{context}: null space dimension appears to be {tiny}"),
            classes: Vec::new(),
        });
    }

    let mut candidates: Vec<usize> = vec![n - 1, 0, n / 2];
    candidates.extend(0..n);
    candidates.dedup();
    let mut best_residual = f64::INFINITY;
    for &k in &candidates {
        let mut sys = b.transpose();
        for j in 0..n {
            sys[(k, j)] = 1.0;
        }
        let mut rhs = Matrix::zeros(n, 1);
        rhs[(k, 0)] = 1.0;
        let lu = sys.clone().lu();
        let Some(mut sol) = lu.solve(&rhs) else {
            continue;
        };
        // One step of iterative refinement buys a few digits on stiff systems.
        let defect = &rhs - &sys * &sol;
        if let Some(correction) = lu.solve(&defect) {
            sol += correction;
        }
        let x = Matrix::from_fn(1, n, |_, j| sol[(j, 0)]);
        let residual = (&x * b).amax();
        if residual <= residual_tol {
            let mut out: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
            let mass: f64 = out.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            for v in &mut out {
                *v /= mass;
            }
            return Ok(out);
        }
        best_residual = best_residual.min(residual);
    }
    Err(Error::Singular {
        context: format!("{context}: no null vector met residual {residual_tol:.1e} (best {best_residual:.3e})"),
    })
}

/// Solves `X a = b` for `X` via one LU of `a^T` with a block right-hand side.
/// Backed by faer, which is several times faster than the naive dense kernels
/// at the block sizes the level recursion reaches.
pub(crate) fn solve_xa_eq_b(a: &Matrix, b: &Matrix, context: &str) -> Result<Matrix> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(b.ncols(), n);
    let at = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(j, i)]);
    let rhs = faer::Mat::<f64>::from_fn(n, b.nrows(), |i, j| b[(j, i)]);
    let lu = at.partial_piv_lu();
    let xt = faer::linalg::solvers::Solve::solve(&lu, &rhs);
    let x = Matrix::from_fn(b.nrows(), n, |i, j| xt[(j, i)]);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            context: context.to_string(),
        });
    }
    Ok(x)
}

/// Strongly connected components of the directed graph with an edge `i -> j`
/// whenever `m[(i, j)] > tol` (diagonal ignored). Kosaraju on a dense matrix;
/// fine for the small phase spaces this crate deals with.
pub(crate) fn communicating_classes(m: &Matrix, tol: f64) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let edge = |i: usize, j: usize| i != j && m[(i, j)] > tol;

    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        // Iterative DFS, recording finish order.
        let mut stack = vec![(start, 0usize)];
        seen[start] = true;
        while let Some(&(v, next)) = stack.last() {
            if next < n {
                stack.last_mut().expect("nonempty").1 += 1;
                if edge(v, next) && !seen[next] {
                    seen[next] = true;
                    stack.push((next, 0));
                }
            } else {
                order.push(v);
                stack.pop();
            }
        }
    }

    let mut comp = vec![usize::MAX; n];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for &start in order.iter().rev() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = classes.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for i in 0..n {
                if edge(i, v) && comp[i] == usize::MAX {
                    comp[i] = id;
                    members.push(i);
                    stack.push(i);
                }
            }
        }
        members.sort_unstable();
        classes.push(members);
    }
    classes
}
