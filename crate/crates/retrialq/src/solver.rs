//! Steady-state computation on the truncated level set.
//!
//! The stationary row vector satisfies the level-geometric relation
//! `z(l+1) = z(l) R(l)` where the rate matrices solve, level by level,
//!
//! ```text
//! Q(l,l+1) + R(l) Q(l+1,l+1) + R(l) R(l+1) Q(l+2,l+1) = 0
//! ```
//!
//! with `R(top) = 0` on the truncated chain. The backward recursion
//! `R(l-1) = -Q(l-1,l) (Q(l,l) + R(l) Q(l+1,l))^{-1}` computes them exactly
//! (up to the linear-solve residual, which is checked against 1e-9 at every
//! level and stored); the boundary vector is the left null vector of
//! `Q(0,0) + R(0) Q(1,0)`; normalization spreads the mass over all levels.
//!
//! [`direct_solve`] is the independent oracle: it solves `z Q = 0, z e = 1`
//! densely on the whole truncated generator and shares no code with the
//! recursion path.

use crate::error::{Error, Result};
use crate::generator::{assemble_truncated, Assembler, TruncatedGenerator};
use crate::kron::{self, Matrix};
use crate::linalg::left_null_vector;
use crate::measures;
use crate::model::{ModelConfig, TruncationPolicy};
use crate::state::{LevelLayout, Mode};
use std::io::Write;
use std::sync::Arc;

/// Residual bound enforced on the rate-matrix defining equations.
pub const EQ_RESIDUAL_TOL: f64 = 1e-9;

/// Knobs for a solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub mode: Mode,
    /// Entry cap per dense block (see [`crate::kron::DEFAULT_ENTRY_CAP`]).
    pub entry_cap: usize,
    /// Total-dimension cap for the dense direct-solve oracle.
    pub dense_cap: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Lumped,
            entry_cap: kron::DEFAULT_ENTRY_CAP,
            dense_cap: 5000,
        }
    }
}

impl SolveOptions {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// The stationary distribution of the truncated chain.
#[derive(Debug, Clone)]
pub struct SteadyState {
    /// Truncation level: levels `0..=top` are represented.
    pub top: usize,
    pub mode: Mode,
    /// Per-level probability vectors.
    pub z: Vec<Vec<f64>>,
    /// Rate matrices `R(0..top-1)`; empty when produced by [`direct_solve`].
    pub rate_matrices: Vec<Matrix>,
    pub layouts: Vec<Arc<LevelLayout>>,
    /// Largest defining-equation or boundary residual encountered.
    pub residual: f64,
    /// Most negative entry seen before clamping to zero.
    pub min_entry: f64,
}

impl SteadyState {
    pub fn level_mass(&self, level: usize) -> f64 {
        self.z[level].iter().sum()
    }

    /// Mass sitting on the truncation level itself.
    pub fn tail_mass(&self) -> f64 {
        self.level_mass(self.top)
    }

    pub fn total_mass(&self) -> f64 {
        self.z.iter().map(|v| v.iter().sum::<f64>()).sum()
    }
}

/// Rate matrices of the truncated chain, bottom up: `rates[l]` maps level `l`
/// to `l+1`. Also returns the boundary matrix `Q(0,0) + R(0) Q(1,0)` and the
/// worst defining-equation residual.
pub fn rate_matrices(
    cfg: &ModelConfig,
    mode: Mode,
    top: usize,
    entry_cap: usize,
) -> Result<(Vec<Matrix>, Matrix, f64)> {
    assert!(top >= 1);
    let asm = Assembler::new(cfg, mode, entry_cap);
    // a = Q(top,top) with the lost-orbit fold applied.
    let mut a = asm.build_main(top)?;
    {
        let up_top = asm.build_upper(top)?;
        for i in 0..a.nrows() {
            a[(i, i)] += up_top.row(i).sum();
        }
    }
    let mut rates_rev: Vec<Matrix> = Vec::with_capacity(top);
    let mut worst_residual: f64 = 0.0;
    for level in (1..=top).rev() {
        let up_prev = asm.build_upper(level - 1)?;
        let neg = -&up_prev;
        let mut r_prev = crate::linalg::solve_xa_eq_b(
            &a,
            &neg,
            &format!("rate-matrix recursion at level {level} (is every rate zero?)"),
        )?;
        let residual = (&up_prev + &r_prev * &a).amax();
        worst_residual = worst_residual.max(residual);
        if residual > EQ_RESIDUAL_TOL {
            return Err(Error::Singular {
                context: format!(
                    "rate-matrix equation residual {residual:.3e} at level {} exceeds {EQ_RESIDUAL_TOL:.1e}",
                    level - 1
                ),
            });
        }
        for v in r_prev.iter_mut() {
            if *v < 0.0 {
                if *v < -1e-9 {
                    return Err(Error::Singular {
                        context: format!("rate matrix at level {} has entry {v:.3e} < -1e-9", level - 1),
                    });
                }
                *v = 0.0;
            }
        }
        a = asm.build_main(level - 1)?;
        a += &r_prev * asm.build_lower(level)?;
        rates_rev.push(r_prev);
    }
    rates_rev.reverse();
    Ok((rates_rev, a, worst_residual))
}

/// Left null vector of the boundary matrix, normalized to sum 1.
pub fn boundary_solve(boundary: &Matrix) -> Result<Vec<f64>> {
    left_null_vector(boundary, 1e-10, "level-0 boundary system")
}

/// Spreads the boundary vector through the rate matrices and normalizes.
pub fn propagate_and_normalize(
    z0: Vec<f64>,
    rates: &[Matrix],
    layouts: Vec<Arc<LevelLayout>>,
    mode: Mode,
    residual: f64,
) -> Result<SteadyState> {
    let top = rates.len();
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(top + 1);
    let mut min_entry: f64 = 0.0;
    x.push(z0);
    for r in rates {
        let prev = kron::row(x.last().expect("nonempty"));
        let next = prev * r;
        let mut v: Vec<f64> = next.iter().copied().collect();
        for e in &mut v {
            if *e < 0.0 {
                min_entry = min_entry.min(*e);
                if *e < -1e-9 {
                    return Err(Error::Singular {
                        context: format!("steady-state entry {e:.3e} below -1e-9 during propagation"),
                    });
                }
                *e = 0.0;
            }
        }
        x.push(v);
    }
    let total: f64 = x.iter().map(|v| v.iter().sum::<f64>()).sum();
    if !(total > 0.0) {
        return Err(Error::Singular {
            context: "steady-state propagation produced zero total mass".into(),
        });
    }
    for v in &mut x {
        for e in v.iter_mut() {
            *e /= total;
        }
    }
    // One more pass kills the accumulated rounding of the big division.
    let mass: f64 = x.iter().map(|v| v.iter().sum::<f64>()).sum();
    if (mass - 1.0).abs() > 1e-13 {
        for v in &mut x {
            for e in v.iter_mut() {
                *e /= mass;
            }
        }
    }
    Ok(SteadyState {
        top,
        mode,
        z: x,
        rate_matrices: rates.to_vec(),
        layouts,
        residual,
        min_entry,
    })
}

/// Full matrix-analytic solve at a fixed truncation level.
pub fn solve_truncated(cfg: &ModelConfig, mode: Mode, top: usize, entry_cap: usize) -> Result<SteadyState> {
    let (rates, boundary, eq_residual) = rate_matrices(cfg, mode, top, entry_cap)?;
    let z0 = boundary_solve(&boundary)?;
    let boundary_residual = (kron::row(&z0) * &boundary).amax();
    let asm = Assembler::new(cfg, mode, entry_cap);
    let layouts = (0..=top).map(|l| asm.layout(l)).collect::<Result<Vec<_>>>()?;
    propagate_and_normalize(z0, &rates, layouts, mode, eq_residual.max(boundary_residual))
}

/// Outcome of the adaptive truncation search.
#[derive(Debug, Clone, Copy)]
pub struct TruncationReport {
    pub top: usize,
    /// Largest change of any reported measure between the accepted level and
    /// the next one.
    pub measure_delta: f64,
    /// Mass on the accepted truncation level.
    pub tail_mass: f64,
    pub epsilon: f64,
}

/// Finds the smallest truncation level at which every reported measure is
/// stable to `epsilon` under one more level AND the top-level mass is below
/// `epsilon`. Returns the accepted solve alongside the convergence report.
pub fn choose_truncation(
    cfg: &ModelConfig,
    mode: Mode,
    epsilon: f64,
    level_cap: usize,
    entry_cap: usize,
) -> Result<(SteadyState, TruncationReport)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "truncation epsilon {epsilon} must be positive"
        )));
    }
    let mut prev: Option<(SteadyState, measures::MeasureReport)> = None;
    let mut last_delta = f64::INFINITY;
    let mut last_tail = f64::INFINITY;
    for top in 1..=level_cap.max(1) {
        let ss = solve_truncated(cfg, mode, top, entry_cap)?;
        let report = measures::evaluate(&ss, cfg)?;
        if let Some((prev_ss, prev_report)) = &prev {
            let delta = measures::report_delta(prev_report, &report);
            let tail = prev_ss.tail_mass();
            if delta <= epsilon && tail <= epsilon {
                let accepted = prev.take().expect("checked").0;
                return Ok((
                    accepted,
                    TruncationReport {
                        top: top - 1,
                        measure_delta: delta,
                        tail_mass: tail,
                        epsilon,
                    },
                ));
            }
            last_delta = delta;
            last_tail = tail;
        }
        prev = Some((ss, report));
    }
    Err(Error::NonConvergence {
        m_cap: level_cap,
        measure_delta: last_delta,
        tail_mass: last_tail,
        epsilon,
    })
}

/// Solves according to the config's truncation policy.
pub fn solve(cfg: &ModelConfig, opts: &SolveOptions) -> Result<SteadyState> {
    match cfg.truncation {
        TruncationPolicy::Fixed(top) => solve_truncated(cfg, opts.mode, top.max(1), opts.entry_cap),
        TruncationPolicy::Adaptive { epsilon, cap } => {
            choose_truncation(cfg, opts.mode, epsilon, cap, opts.entry_cap).map(|(ss, _)| ss)
        }
    }
}

/// Dense direct solve of `z Q = 0, z e = 1` on the truncated generator.
/// Verification oracle only; shares no code with the recursion path.
pub fn direct_solve(cfg: &ModelConfig, mode: Mode, top: usize, opts: &SolveOptions) -> Result<SteadyState> {
    let gen = assemble_truncated(cfg, mode, top, opts.entry_cap)?;
    let q = gen.dense(opts.dense_cap)?;
    let flat = left_null_vector(&q, 1e-10, "dense truncated generator")?;
    let residual = (kron::row(&flat) * &q).amax();
    let mut z = Vec::with_capacity(top + 1);
    let mut offset = 0usize;
    for layout in &gen.layouts {
        z.push(flat[offset..offset + layout.total].to_vec());
        offset += layout.total;
    }
    Ok(SteadyState {
        top,
        mode,
        z,
        rate_matrices: Vec::new(),
        layouts: gen.layouts,
        residual,
        min_entry: 0.0,
    })
}

/// Largest absolute entry of `z Q` reconstructed blockwise; the global
/// balance certificate used by tests.
pub fn global_balance_residual(ss: &SteadyState, gen: &TruncatedGenerator) -> f64 {
    let mut worst: f64 = 0.0;
    for col_level in 0..=ss.top {
        let dim = gen.layouts[col_level].total;
        let mut acc = Matrix::zeros(1, dim);
        let blocks = &gen.levels[col_level];
        acc += kron::row(&ss.z[col_level]) * &blocks.main;
        if col_level >= 1 {
            if let Some(up) = &gen.levels[col_level - 1].up {
                acc += kron::row(&ss.z[col_level - 1]) * up;
            }
        }
        if col_level + 1 <= ss.top {
            if let Some(down) = &gen.levels[col_level + 1].down {
                acc += kron::row(&ss.z[col_level + 1]) * down;
            }
        }
        worst = worst.max(acc.amax());
    }
    worst
}

/// Steady-state CSV export: `level,kappa,j,component_index,probability`.
pub fn write_steady_csv<W: Write>(ss: &SteadyState, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "level,kappa,j,component_index,probability")?;
    for (level, layout) in ss.layouts.iter().enumerate() {
        for seg in layout.segments() {
            for c in 0..seg.width {
                writeln!(
                    out,
                    "{level},{},{},{c},{:.17e}",
                    seg.kappa,
                    seg.j,
                    ss.z[level][seg.offset + c]
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;
    use crate::model::{MarkedMap, PhaseType, RetrialPh};
    use crate::state::{lump_matrix, SpaceDims};
    use approx::assert_abs_diff_eq;

    fn scalar_config(
        lambda_n: f64,
        lambda_h: f64,
        mu_n: f64,
        mu_h: f64,
        leave: f64,
        retry: f64,
        channels: usize,
    ) -> ModelConfig {
        ModelConfig {
            arrivals: MarkedMap::poisson(lambda_n, lambda_h),
            service_handoff: PhaseType::exponential(mu_h),
            service_new: PhaseType::exponential(mu_n),
            retrial: RetrialPh::exponential(leave, retry),
            channels,
            truncation: TruncationPolicy::Fixed(2),
            row_sum_tol: 1e-9,
        }
    }

    const CAP: usize = kron::DEFAULT_ENTRY_CAP;

    #[test]
    fn scalar_rate_matrix_matches_dense_algebra() {
        // One channel, unit alphabets, truncation at 1: R(0) = -Q01 * Q11f^{-1}
        // with the fold applied, computed here by plain dense inversion.
        let cfg = scalar_config(0.6, 0.8, 1.0, 1.5, 0.3, 0.7, 1);
        let (rates, _, _) = rate_matrices(&cfg, Mode::Ordered, 1, CAP).unwrap();
        assert_eq!(rates.len(), 1);
        let gen = assemble_truncated(&cfg, Mode::Ordered, 1, CAP).unwrap();
        let q01 = gen.levels[0].up.as_ref().unwrap();
        let q11 = &gen.levels[1].main; // fold already applied
        let want = -(q01 * q11.clone().try_inverse().unwrap());
        assert!((rates[0].clone() - want).amax() <= 1e-12);
        // Only the full-occupancy row feeds the orbit.
        assert_abs_diff_eq!(rates[0].row(0).sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_new_call_rate_leaves_orbit_unreachable() {
        // Without new calls the orbit is unreachable. The preemption part of
        // the upper blocks still exists on (never-visited) rows with new calls
        // in service, so the rate matrices vanish on reachable rows only and
        // the whole stationary mass sits at level 0.
        let cfg = scalar_config(0.0, 0.8, 1.0, 1.5, 0.3, 0.7, 1);
        let (rates, _, _) = rate_matrices(&cfg, Mode::Ordered, 3, CAP).unwrap();
        let asm = Assembler::new(&cfg, Mode::Ordered, CAP);
        for (level, r) in rates.iter().enumerate() {
            let layout = asm.layout(level).unwrap();
            for seg in layout.segments() {
                if seg.j == seg.kappa {
                    for i in 0..seg.width {
                        assert_eq!(r.row(seg.offset + i).sum(), 0.0);
                    }
                }
            }
        }
        let ss = solve_truncated(&cfg, Mode::Ordered, 3, CAP).unwrap();
        assert_abs_diff_eq!(ss.level_mass(0), 1.0, epsilon = 1e-12);
        for level in 1..=3 {
            assert_abs_diff_eq!(ss.level_mass(level), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn boundary_solution_has_small_residual() {
        let cfg = scalar_config(0.6, 0.8, 1.0, 1.5, 0.3, 0.7, 1);
        let (_, boundary, _) = rate_matrices(&cfg, Mode::Ordered, 2, CAP).unwrap();
        let z0 = boundary_solve(&boundary).unwrap();
        let residual = (kron::row(&z0) * &boundary).amax();
        assert!(residual <= 1e-10, "residual {residual}");
    }

    #[test]
    fn no_arrivals_concentrate_at_idle_level() {
        // Without arrivals the chain stays empty; the idle segment carries the
        // arrival chain's stationary split.
        let mut cfg = scalar_config(0.0, 0.0, 1.0, 1.5, 0.3, 0.7, 1);
        cfg.arrivals = MarkedMap::new(
            kron::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]),
            kron::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
            kron::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
        );
        let ss = solve_truncated(&cfg, Mode::Ordered, 1, CAP).unwrap();
        let layout = &ss.layouts[0];
        let seg = *layout.segment(0, 0);
        assert_abs_diff_eq!(ss.z[0][seg.offset], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ss.z[0][seg.offset + 1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ss.level_mass(0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_analytic_agrees_with_direct_solve() {
        let opts = SolveOptions::default();
        for mode in [Mode::Ordered, Mode::Lumped] {
            for (phases, s, top) in [(1usize, 1usize, 2usize), (2, 2, 4), (2, 1, 4), (1, 2, 2)] {
                let cfg = if phases == 1 {
                    scalar_config(0.6, 0.8, 1.0, 1.5, 0.3, 0.7, s)
                } else {
                    let mut c = config::preset("section5").unwrap();
                    c.channels = s;
                    c
                };
                let ma = solve_truncated(&cfg, mode, top, CAP).unwrap();
                let dense = direct_solve(&cfg, mode, top, &opts).unwrap();
                for l in 0..=top {
                    for (a, b) in ma.z[l].iter().zip(&dense.z[l]) {
                        assert!(
                            (a - b).abs() <= 1e-8,
                            "mode {mode} phases {phases} s {s} top {top} level {l}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ordered_and_lumped_agree_after_aggregation() {
        let cfg = config::preset("section5").unwrap();
        let top = 3;
        let ord = solve_truncated(&cfg, Mode::Ordered, top, CAP).unwrap();
        let lump = solve_truncated(&cfg, Mode::Lumped, top, CAP).unwrap();
        let dims = SpaceDims::of(&cfg);
        for l in 0..=top {
            let v = lump_matrix(dims, l, CAP).unwrap();
            let agg = kron::row(&ord.z[l]) * &v;
            for (a, b) in agg.iter().zip(&lump.z[l]) {
                assert!((a - b).abs() <= 1e-8, "level {l}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn global_balance_and_monotone_mass() {
        let cfg = config::preset("section5").unwrap();
        let ss = solve_truncated(&cfg, Mode::Lumped, 5, CAP).unwrap();
        assert_abs_diff_eq!(ss.total_mass(), 1.0, epsilon = 1e-12);
        let gen = assemble_truncated(&cfg, Mode::Lumped, 5, CAP).unwrap();
        assert!(global_balance_residual(&ss, &gen) <= 1e-9);
        // Level mass decays along the orbit once the truncation has converged;
        // a too-early truncation piles mass onto the reflecting top instead.
        let converged = solve_truncated(&cfg, Mode::Lumped, 20, CAP).unwrap();
        for l in 1..=20 {
            assert!(converged.level_mass(l) <= converged.level_mass(l - 1), "level {l}");
        }
    }

    #[test]
    fn adaptive_truncation_stops_immediately_without_new_calls() {
        let cfg = scalar_config(0.0, 0.8, 1.0, 1.5, 0.3, 0.7, 1);
        let (ss, report) = choose_truncation(&cfg, Mode::Ordered, 1e-5, 12, CAP).unwrap();
        assert_eq!(report.top, 1);
        assert_eq!(ss.top, 1);
        assert_eq!(report.tail_mass, 0.0);
    }

    #[test]
    fn light_load_truncates_early() {
        let cfg = scalar_config(0.3, 0.2, 1.0, 1.0, 0.5, 1.0, 1);
        let (ss, report) = choose_truncation(&cfg, Mode::Lumped, 1e-5, 12, CAP).unwrap();
        assert!(report.top <= 8, "expected small truncation, got {}", report.top);
        assert!(ss.tail_mass() <= 1e-5);
    }

    #[test]
    fn exhausted_level_cap_is_loud() {
        // Heavy enough that three levels cannot stabilize the measures.
        let cfg = scalar_config(1.2, 0.8, 0.5, 0.5, 0.05, 0.1, 1);
        match choose_truncation(&cfg, Mode::Lumped, 1e-9, 3, CAP) {
            Err(Error::NonConvergence { m_cap: 3, .. }) => {}
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn steady_csv_has_header_and_rows() {
        let cfg = scalar_config(0.6, 0.8, 1.0, 1.5, 0.3, 0.7, 1);
        let ss = solve_truncated(&cfg, Mode::Ordered, 1, CAP).unwrap();
        let mut buf = Vec::new();
        write_steady_csv(&ss, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("level,kappa,j,component_index,probability"));
        assert_eq!(text.lines().count(), 1 + 3 + 3);
    }
}
