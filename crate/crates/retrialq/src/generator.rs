//! Assembly of the level-dependent QBD generator.
//!
//! The chain is block-tridiagonal in the orbit level. For a source level `l`:
//!
//! * the upper block (level `l -> l+1`) is nonzero only on rows with every
//!   channel busy: a blocked new call joins the orbit, or an arriving handoff
//!   call preempts the most recently started new call (its service phase is
//!   erased, a fresh handoff service starts, and the victim joins the orbit);
//! * the lower block (`l -> l-1`) removes one orbiting customer, either by
//!   abandonment or by a successful retrial that starts a new-call service on
//!   an idle channel;
//! * the main block carries arrival-phase moves, service starts on idle
//!   channels, service completions, retrial phase evolution, and — when every
//!   channel is busy — failed retrial attempts; with all channels serving
//!   handoff calls an arriving handoff call is simply lost (its rate folds
//!   into the diagonal).
//!
//! Blocks are built per level on demand; Kronecker factors are memoized across
//! blocks. All caches serialize insertion, so distinct levels may be built
//! concurrently.

use crate::error::{Error, Result};
use crate::kron::{self, Matrix};
use crate::model::ModelConfig;
use crate::state::{LevelLayout, LumpedOrbit, Mode, OrbitOps, OrderedOrbit, SpaceDims};
use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

/// The three generator blocks rooted at one level. `up` is `None` only on the
/// folded top level of a truncated chain, `down` is `None` at level 0.
#[derive(Debug, Clone)]
pub struct LevelBlocks {
    pub level: usize,
    pub main: Matrix,
    pub up: Option<Matrix>,
    pub down: Option<Matrix>,
}

impl LevelBlocks {
    /// Largest absolute row sum over `[down | main | up]`.
    pub fn conservation_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.main.nrows() {
            let mut s = self.main.row(i).sum();
            if let Some(up) = &self.up {
                s += up.row(i).sum();
            }
            if let Some(down) = &self.down {
                s += down.row(i).sum();
            }
            worst = worst.max(s.abs());
        }
        worst
    }
}

/// Memoizing block builder for one model and orbit representation.
pub struct Assembler<'a> {
    cfg: &'a ModelConfig,
    pub mode: Mode,
    pub cap: usize,
    dims: SpaceDims,
    layouts: Mutex<HashMap<usize, Arc<LevelLayout>>>,
    service_ops: Mutex<HashMap<(u8, usize), Arc<Matrix>>>,
    orbit_ops: Mutex<HashMap<(u8, usize), Arc<Matrix>>>,
}

const PSI_H: u8 = 0;
const PSI_N: u8 = 1;
const PHI_H: u8 = 2;
const PHI_N: u8 = 3;
const ORBIT_EVOLVE: u8 = 0;
const ORBIT_FAILED: u8 = 1;
const ORBIT_ABANDON: u8 = 2;
const ORBIT_SUCCESS: u8 = 3;
const ORBIT_JOIN: u8 = 4;

impl<'a> Assembler<'a> {
    pub fn new(cfg: &'a ModelConfig, mode: Mode, cap: usize) -> Self {
        Self {
            cfg,
            mode,
            cap,
            dims: SpaceDims::of(cfg),
            layouts: Mutex::new(HashMap::new()),
            service_ops: Mutex::new(HashMap::new()),
            orbit_ops: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn layout(&self, level: usize) -> Result<Arc<LevelLayout>> {
        if let Some(found) = self.layouts.lock().unwrap().get(&level) {
            return Ok(found.clone());
        }
        let built = Arc::new(LevelLayout::new(self.dims, level, self.mode)?);
        let mut guard = self.layouts.lock().unwrap();
        Ok(guard.entry(level).or_insert(built).clone())
    }

    fn service_op(&self, kind: u8, count: usize) -> Result<Arc<Matrix>> {
        if let Some(found) = self.service_ops.lock().unwrap().get(&(kind, count)) {
            return Ok(found.clone());
        }
        let built = Arc::new(match kind {
            PSI_H => kron::psi_service(&self.cfg.service_handoff, count, self.cap)?,
            PSI_N => kron::psi_service(&self.cfg.service_new, count, self.cap)?,
            PHI_H => kron::phi_service(&self.cfg.service_handoff, count, self.cap)?,
            PHI_N => kron::phi_service(&self.cfg.service_new, count, self.cap)?,
            _ => unreachable!(),
        });
        let mut guard = self.service_ops.lock().unwrap();
        Ok(guard.entry((kind, count)).or_insert(built).clone())
    }

    fn with_orbit<T>(&self, f: impl FnOnce(&dyn OrbitOps) -> Result<T>) -> Result<T> {
        match self.mode {
            Mode::Ordered => f(&OrderedOrbit {
                r: &self.cfg.retrial,
                cap: self.cap,
            }),
            Mode::Lumped => f(&LumpedOrbit {
                r: &self.cfg.retrial,
                cap: self.cap,
            }),
        }
    }

    fn orbit_op(&self, kind: u8, level: usize) -> Result<Arc<Matrix>> {
        if let Some(found) = self.orbit_ops.lock().unwrap().get(&(kind, level)) {
            return Ok(found.clone());
        }
        let beta_n = self.cfg.service_new.beta.clone();
        let built = Arc::new(self.with_orbit(|orbit| match kind {
            ORBIT_EVOLVE => orbit.evolve(level),
            ORBIT_FAILED => orbit.failed_retry(level),
            ORBIT_ABANDON => orbit.abandon(level),
            ORBIT_SUCCESS => orbit.success(level, &beta_n),
            ORBIT_JOIN => orbit.join(level),
            _ => unreachable!(),
        })?);
        let mut guard = self.orbit_ops.lock().unwrap();
        Ok(guard.entry((kind, level)).or_insert(built).clone())
    }

    fn identity(n: usize) -> Matrix {
        Matrix::identity(n, n)
    }

    fn kron_chain(&self, factors: &[&Matrix]) -> Result<Matrix> {
        let mut acc = Matrix::from_element(1, 1, 1.0);
        for f in factors {
            acc = kron::kron_product(&acc, f, self.cap)?;
        }
        Ok(acc)
    }

    /// Block `level -> level+1`; nonzero only on rows with `kappa = S`.
    pub fn build_upper(&self, level: usize) -> Result<Matrix> {
        let src = self.layout(level)?;
        let dst = self.layout(level + 1)?;
        kron::check_cap(
            &format!("level {level} upper block"),
            src.total,
            dst.total,
            self.cap,
        )?;
        let mut out = Matrix::zeros(src.total, dst.total);
        let d = &self.dims;
        let s = d.channels;
        let join = self.orbit_op(ORBIT_JOIN, level)?;
        let beta_h = kron::row(&self.cfg.service_handoff.beta);
        let erase_new = Matrix::from_element(d.new_call, 1, 1.0);
        for j in 0..=s {
            let seg_src = *src.segment(s, j);
            // Blocked new call joins the orbit; channel states are untouched.
            let keep = Self::identity(d.handoff.pow(j as u32) * d.new_call.pow((s - j) as u32));
            let x = self.kron_chain(&[&self.cfg.arrivals.c_new, &keep, &join])?;
            paste(&mut out, seg_src.offset, dst.segment(s, j).offset, &x);
            if j < s {
                // Handoff arrival preempts the youngest new call: fresh handoff
                // phase appended, last new-call factor erased, victim joins the
                // orbit in a fresh retrial phase.
                let keep_h = Self::identity(d.handoff.pow(j as u32));
                let keep_n = Self::identity(d.new_call.pow((s - j - 1) as u32));
                let xhat = self.kron_chain(&[
                    &self.cfg.arrivals.c_handoff,
                    &keep_h,
                    &beta_h,
                    &keep_n,
                    &erase_new,
                    &join,
                ])?;
                paste(&mut out, seg_src.offset, dst.segment(s, j + 1).offset, &xhat);
            }
        }
        Ok(out)
    }

    /// Block `level -> level-1`; `level >= 1`.
    pub fn build_lower(&self, level: usize) -> Result<Matrix> {
        assert!(level >= 1, "lower block needs a populated orbit");
        let src = self.layout(level)?;
        let dst = self.layout(level - 1)?;
        kron::check_cap(
            &format!("level {level} lower block"),
            src.total,
            dst.total,
            self.cap,
        )?;
        let mut out = Matrix::zeros(src.total, dst.total);
        let d = &self.dims;
        let abandon = self.orbit_op(ORBIT_ABANDON, level)?;
        let success = self.orbit_op(ORBIT_SUCCESS, level)?;
        for seg in src.segments() {
            let keep = Self::identity(seg.phase_width);
            let z = kron::kron_product(&keep, &abandon, self.cap)?;
            paste(&mut out, seg.offset, dst.segment(seg.kappa, seg.j).offset, &z);
            if seg.kappa < d.channels {
                // Successful retrial: one orbit customer starts a new-call
                // service; the fresh service phase is the last new-call factor
                // of the destination segment, which `success` already indexes
                // ahead of the surviving orbit coordinates.
                let zhat = kron::kron_product(&keep, &success, self.cap)?;
                paste(&mut out, seg.offset, dst.segment(seg.kappa + 1, seg.j).offset, &zhat);
            }
        }
        Ok(out)
    }

    /// Within-level block (no orbit size change), unfolded.
    pub fn build_main(&self, level: usize) -> Result<Matrix> {
        let layout = self.layout(level)?;
        kron::check_cap(
            &format!("level {level} main block"),
            layout.total,
            layout.total,
            self.cap,
        )?;
        let mut out = Matrix::zeros(layout.total, layout.total);
        let d = &self.dims;
        let s = d.channels;
        let evolve = self.orbit_op(ORBIT_EVOLVE, level)?;
        let failed = self.orbit_op(ORBIT_FAILED, level)?;
        let orbit_id = Self::identity(evolve.nrows());
        let beta_h = kron::row(&self.cfg.service_handoff.beta);
        let beta_n = kron::row(&self.cfg.service_new.beta);
        let lost_handoff = &self.cfg.arrivals.c0 + &self.cfg.arrivals.c_handoff;
        for seg in layout.segments() {
            let (kappa, j) = (seg.kappa, seg.j);
            // Diagonal: arrival phase, service phases and retrial phases evolve.
            let arrival_part = if kappa == s && j == s {
                &lost_handoff
            } else {
                &self.cfg.arrivals.c0
            };
            let psi_h = self.service_op(PSI_H, j)?;
            let psi_n = self.service_op(PSI_N, kappa - j)?;
            let mut diag = kron::kron_sum(arrival_part, &psi_h, self.cap)?;
            diag = kron::kron_sum(&diag, &psi_n, self.cap)?;
            diag = kron::kron_sum(&diag, &evolve, self.cap)?;
            if kappa == s {
                let keep = Self::identity(seg.phase_width);
                diag += kron::kron_product(&keep, &failed, self.cap)?;
            }
            paste(&mut out, seg.offset, seg.offset, &diag);

            if kappa < s {
                // Arrivals start services on an idle channel.
                let keep = Self::identity(d.handoff.pow(j as u32) * d.new_call.pow((kappa - j) as u32));
                let start_new = self.kron_chain(&[&self.cfg.arrivals.c_new, &keep, &beta_n, &orbit_id])?;
                paste(&mut out, seg.offset, layout.segment(kappa + 1, j).offset, &start_new);
                let keep_h = Self::identity(d.handoff.pow(j as u32));
                let keep_rest = Self::identity(d.new_call.pow((kappa - j) as u32) * evolve.nrows());
                let start_handoff =
                    self.kron_chain(&[&self.cfg.arrivals.c_handoff, &keep_h, &beta_h, &keep_rest])?;
                paste(&mut out, seg.offset, layout.segment(kappa + 1, j + 1).offset, &start_handoff);
            }
            if kappa >= 1 {
                // Service completions free a channel.
                if j <= kappa - 1 {
                    let pre = Self::identity(d.arrival * d.handoff.pow(j as u32));
                    let post = Self::identity(evolve.nrows());
                    let phi_n = self.service_op(PHI_N, kappa - j)?;
                    let complete_new = self.kron_chain(&[&pre, &phi_n, &post])?;
                    paste(&mut out, seg.offset, layout.segment(kappa - 1, j).offset, &complete_new);
                }
                if j >= 1 {
                    let pre = Self::identity(d.arrival);
                    let post = Self::identity(d.new_call.pow((kappa - j) as u32) * evolve.nrows());
                    let phi_h = self.service_op(PHI_H, j)?;
                    let complete_handoff = self.kron_chain(&[&pre, &phi_h, &post])?;
                    paste(&mut out, seg.offset, layout.segment(kappa - 1, j - 1).offset, &complete_handoff);
                }
            }
        }
        Ok(out)
    }

    /// All three blocks rooted at one level of the infinite chain.
    pub fn blocks(&self, level: usize) -> Result<LevelBlocks> {
        Ok(LevelBlocks {
            level,
            main: self.build_main(level)?,
            up: Some(self.build_upper(level)?),
            down: if level == 0 {
                None
            } else {
                Some(self.build_lower(level)?)
            },
        })
    }
}

fn paste(dst: &mut Matrix, row0: usize, col0: usize, src: &Matrix) {
    let mut view = dst.view_mut((row0, col0), (src.nrows(), src.ncols()));
    view += src;
}

/// The finite generator on levels `0..=top`: at the top level the upper
/// block's row sums are folded into the main diagonal (orbit joins that would
/// exceed the truncation are lost), so every row of the truncated matrix sums
/// to zero exactly.
#[derive(Debug)]
pub struct TruncatedGenerator {
    pub top: usize,
    pub mode: Mode,
    pub levels: Vec<LevelBlocks>,
    pub layouts: Vec<Arc<LevelLayout>>,
}

impl TruncatedGenerator {
    pub fn level_dim(&self, level: usize) -> usize {
        self.layouts[level].total
    }

    pub fn total_dim(&self) -> usize {
        self.layouts.iter().map(|l| l.total).sum()
    }

    /// Largest absolute row sum across all levels.
    pub fn conservation_residual(&self) -> f64 {
        self.levels
            .iter()
            .map(LevelBlocks::conservation_residual)
            .fold(0.0, f64::max)
    }

    /// The truncated generator as one dense matrix (tests and the dense
    /// direct-solve oracle; guarded by `dense_cap` on the total dimension).
    pub fn dense(&self, dense_cap: usize) -> Result<Matrix> {
        let n = self.total_dim();
        if n > dense_cap {
            return Err(Error::DimensionCap {
                what: "dense truncated generator".into(),
                rows: n,
                cols: n,
                cap: dense_cap * dense_cap,
            });
        }
        let offsets: Vec<usize> = self
            .layouts
            .iter()
            .scan(0usize, |acc, l| {
                let here = *acc;
                *acc += l.total;
                Some(here)
            })
            .collect();
        let mut q = Matrix::zeros(n, n);
        for (level, blocks) in self.levels.iter().enumerate() {
            paste(&mut q, offsets[level], offsets[level], &blocks.main);
            if let Some(up) = &blocks.up {
                paste(&mut q, offsets[level], offsets[level + 1], up);
            }
            if let Some(down) = &blocks.down {
                paste(&mut q, offsets[level], offsets[level - 1], down);
            }
        }
        Ok(q)
    }
}

/// Builds the truncated chain with the fold applied at level `top`.
pub fn assemble_truncated(
    cfg: &ModelConfig,
    mode: Mode,
    top: usize,
    cap: usize,
) -> Result<TruncatedGenerator> {
    assert!(top >= 1, "truncation needs at least levels 0 and 1");
    let assembler = Assembler::new(cfg, mode, cap);
    let mut levels = Vec::with_capacity(top + 1);
    let mut layouts = Vec::with_capacity(top + 1);
    for level in 0..=top {
        layouts.push(assembler.layout(level)?);
        let mut blocks = assembler.blocks(level)?;
        if level == top {
            let up = blocks.up.take().expect("untruncated block has an upper part");
            for i in 0..blocks.main.nrows() {
                blocks.main[(i, i)] += up.row(i).sum();
            }
        }
        levels.push(blocks);
    }
    Ok(TruncatedGenerator {
        top,
        mode,
        levels,
        layouts,
    })
}

/// Plain-text sparse triplet export (`row col value`, 17 significant digits).
pub fn write_triplets<W: Write>(m: &Matrix, out: &mut W) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if v != 0.0 {
                writeln!(out, "{i} {j} {v:.16e}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;
    use crate::model::{MarkedMap, ModelConfig, PhaseType, RetrialPh, TruncationPolicy};
    use crate::state::lump_matrix;
    use approx::assert_abs_diff_eq;

    pub fn scalar_config(
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
    fn upper_block_vanishes_below_full_occupancy() {
        let cfg = config::preset("section5").unwrap();
        let asm = Assembler::new(&cfg, Mode::Lumped, CAP);
        let up = asm.build_upper(1).unwrap();
        let layout = asm.layout(1).unwrap();
        for seg in layout.segments() {
            if seg.kappa < cfg.channels {
                for i in 0..seg.width {
                    assert_eq!(up.row(seg.offset + i).sum(), 0.0, "row in segment {seg:?}");
                }
            }
        }
    }

    #[test]
    fn all_handoff_rows_have_no_preemption_mass() {
        // In the (S, S) segment only blocked new calls feed the orbit.
        let cfg = config::preset("section5").unwrap();
        let asm = Assembler::new(&cfg, Mode::Ordered, CAP);
        let up = asm.build_upper(0).unwrap();
        let src = asm.layout(0).unwrap();
        let dst = asm.layout(1).unwrap();
        let s = cfg.channels;
        let seg_ss = *src.segment(s, s);
        // Mass may only land in the destination (S, S) segment.
        let dst_ss = *dst.segment(s, s);
        for i in 0..seg_ss.width {
            for jcol in 0..dst.total {
                let v = up[(seg_ss.offset + i, jcol)];
                if !(dst_ss.offset..dst_ss.offset + dst_ss.width).contains(&jcol) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn scalar_upper_rates_split_by_handoff_mix() {
        // One channel, unit alphabets: at (kappa=1, j=0) both a blocked new
        // call and a preempting handoff feed the orbit; at (1,1) only the
        // blocked new call does.
        let cfg = scalar_config(0.7, 1.1, 1.0, 2.0, 0.3, 0.9, 1);
        let asm = Assembler::new(&cfg, Mode::Ordered, CAP);
        let up = asm.build_upper(2).unwrap();
        let src = asm.layout(2).unwrap();
        let row_j0 = src.segment(1, 0).offset;
        let row_j1 = src.segment(1, 1).offset;
        assert_abs_diff_eq!(up.row(row_j0).sum(), 0.7 + 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(up.row(row_j1).sum(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn scalar_lower_rates_are_the_exit_rates() {
        let cfg = scalar_config(0.7, 1.1, 1.0, 2.0, 0.3, 0.9, 1);
        let asm = Assembler::new(&cfg, Mode::Ordered, CAP);
        let low = asm.build_lower(1).unwrap();
        let src = asm.layout(1).unwrap();
        let dst = asm.layout(0).unwrap();
        // From (0,0): abandonment keeps (0,0), success starts a new service.
        let r00 = src.segment(0, 0).offset;
        assert_abs_diff_eq!(low[(r00, dst.segment(0, 0).offset)], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(low[(r00, dst.segment(1, 0).offset)], 0.9, epsilon = 1e-15);
        // With the channel busy there is no success path.
        let r10 = src.segment(1, 0).offset;
        assert_abs_diff_eq!(low.row(r10).sum(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn lower_block_has_no_success_mass_at_full_occupancy() {
        let cfg = config::preset("section5").unwrap();
        let asm = Assembler::new(&cfg, Mode::Lumped, CAP);
        let low = asm.build_lower(2).unwrap();
        let src = asm.layout(2).unwrap();
        let dst = asm.layout(1).unwrap();
        let s = cfg.channels;
        let seg = *src.segment(s, 0);
        let dst_same = *dst.segment(s, 0);
        for i in 0..seg.width {
            let row = low.row(seg.offset + i);
            let in_z: f64 = row
                .iter()
                .enumerate()
                .filter(|(c, _)| (dst_same.offset..dst_same.offset + dst_same.width).contains(c))
                .map(|(_, v)| *v)
                .sum();
            assert_abs_diff_eq!(row.sum(), in_z, epsilon = 1e-13);
        }
    }

    #[test]
    fn scalar_main_diagonal_matches_hand_rates() {
        // (S,S) with an empty orbit: handoff loss folds into the diagonal, so
        // the only outflow is the blocked new call plus the service rate.
        let (ln, lh, mu_n, mu_h) = (0.7, 1.1, 1.3, 2.2);
        let cfg = scalar_config(ln, lh, mu_n, mu_h, 0.3, 0.9, 1);
        let asm = Assembler::new(&cfg, Mode::Ordered, CAP);
        let main = asm.build_main(0).unwrap();
        let layout = asm.layout(0).unwrap();
        let idx_ss = layout.segment(1, 1).offset;
        assert_abs_diff_eq!(main[(idx_ss, idx_ss)], -(ln + mu_h), epsilon = 1e-12);
        // Idle-channel row: new call starts a service at rate lambda_n,
        // handoff at lambda_h, no completions.
        let idx_00 = layout.segment(0, 0).offset;
        assert_abs_diff_eq!(main[(idx_00, layout.segment(1, 0).offset)], ln, epsilon = 1e-15);
        assert_abs_diff_eq!(main[(idx_00, layout.segment(1, 1).offset)], lh, epsilon = 1e-15);
        // Completion rates: kappa=1 rows flow back at their service rates.
        assert_abs_diff_eq!(main[(layout.segment(1, 0).offset, idx_00)], mu_n, epsilon = 1e-15);
        assert_abs_diff_eq!(main[(idx_ss, idx_00)], mu_h, epsilon = 1e-15);
    }

    #[test]
    fn truncated_chain_conserves_mass() {
        for mode in [Mode::Ordered, Mode::Lumped] {
            let cfg = config::preset("section5").unwrap();
            let t = assemble_truncated(&cfg, mode, 3, CAP).unwrap();
            assert!(
                t.conservation_residual() <= 1e-9,
                "{mode} residual {}",
                t.conservation_residual()
            );
        }
    }

    #[test]
    fn section5_lumped_dimension_is_340() {
        let cfg = config::preset("section5").unwrap();
        let t = assemble_truncated(&cfg, Mode::Lumped, 3, CAP).unwrap();
        assert_eq!(t.total_dim(), 340);
    }

    #[test]
    fn lumping_compatibility_per_block() {
        // Q_ordered * V = V * Q_lumped on all three block diagonals.
        let mut cfg = config::preset("section5").unwrap();
        cfg.channels = 2;
        let dims = SpaceDims::of(&cfg);
        let ord = Assembler::new(&cfg, Mode::Ordered, CAP);
        let lump = Assembler::new(&cfg, Mode::Lumped, CAP);
        for level in 0..=3usize {
            let v_here = lump_matrix(dims, level, CAP).unwrap();
            let main_diff =
                ord.build_main(level).unwrap() * &v_here - &v_here * lump.build_main(level).unwrap();
            assert!(main_diff.amax() <= 1e-10, "main, level {level}");
            let v_up = lump_matrix(dims, level + 1, CAP).unwrap();
            let up_diff =
                ord.build_upper(level).unwrap() * &v_up - &v_here * lump.build_upper(level).unwrap();
            assert!(up_diff.amax() <= 1e-10, "up, level {level}");
            if level >= 1 {
                let v_down = lump_matrix(dims, level - 1, CAP).unwrap();
                let down_diff = ord.build_lower(level).unwrap() * &v_down
                    - &v_here * lump.build_lower(level).unwrap();
                assert!(down_diff.amax() <= 1e-10, "down, level {level}");
            }
        }
    }

    #[test]
    fn single_class_reduction_disables_priority_machinery() {
        // No handoff arrivals and no abandonment: the chain reduces to a
        // single-class retrial queue; preemption blocks vanish and the
        // handoff-loss fold is vacuous.
        let mut cfg = scalar_config(0.7, 0.0, 1.0, 2.0, 0.0, 0.9, 2);
        cfg.arrivals = MarkedMap::poisson(0.7, 0.0);
        let asm = Assembler::new(&cfg, Mode::Ordered, CAP);
        let up = asm.build_upper(1).unwrap();
        let src = asm.layout(1).unwrap();
        let dst = asm.layout(2).unwrap();
        for seg in src.segments() {
            if seg.j > 0 {
                continue;
            }
            // All mass stays in the same-j destination segment.
            for i in 0..seg.width {
                let row = up.row(seg.offset + i);
                let dst_seg = *dst.segment(seg.kappa, seg.j);
                let kept: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| (dst_seg.offset..dst_seg.offset + dst_seg.width).contains(c))
                    .map(|(_, v)| *v)
                    .sum();
                assert_abs_diff_eq!(row.sum(), kept, epsilon = 1e-15);
            }
        }
        let t = assemble_truncated(&cfg, Mode::Ordered, 3, CAP).unwrap();
        assert!(t.conservation_residual() <= 1e-9);
    }

    #[test]
    fn cap_error_names_the_level() {
        let cfg = config::preset("section5").unwrap();
        match assemble_truncated(&cfg, Mode::Ordered, 6, 2_000) {
            Err(Error::DimensionCap { what, .. }) => assert!(what.contains("level"), "what = {what}"),
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn triplet_export_is_parseable() {
        let m = kron::from_rows(&[vec![0.0, 1.25], vec![-0.5, 0.0]]);
        let mut buf = Vec::new();
        write_triplets(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0 1 1.25"));
        assert!(lines[1].starts_with("1 0 -5.0"));
    }
}
