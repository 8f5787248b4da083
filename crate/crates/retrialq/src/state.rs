//! Bijective enumeration of the state space at each orbit level.
//!
//! A state is `(level, kappa, j, v, s_h, s_n, orbit)`: `level` orbiting
//! customers, `kappa` busy channels of which `j` serve handoff calls, arrival
//! phase `v`, per-call service phases `s_h`/`s_n`, and an orbit descriptor.
//!
//! # Ordering contract
//!
//! Within a level, states are ordered by `kappa` ascending, then `j`
//! ascending; inside a `(kappa, j)` segment the tensor coordinates run
//! slowest-to-fastest as `v`, the handoff service phases in service-start
//! order, the new-call service phases in service-start order, then the orbit
//! descriptor. Every Kronecker factor placement in the generator assumes
//! exactly this order: freshly started services append as the fastest index of
//! their class block, and a preemption erases the last new-call factor (the
//! most recently started new call).
//!
//! # Orbit representations
//!
//! * `Ordered` tracks the tuple of retrial phases (dimension `N^level`) —
//!   the literal construction, exponential in the level.
//! * `Lumped` tracks only how many orbiting customers sit in each retrial
//!   phase (dimension `C(level+N-1, N-1)`), enumerated in colexicographic
//!   occupancy order. Orbit customers are exchangeable: every orbit transition
//!   acts symmetrically on positions, so the aggregation is exact; see
//!   [`lump_matrix`] and the compatibility tests.

use crate::error::{Error, Result};
use crate::kron::{self, Matrix};
use crate::model::{ModelConfig, RetrialPh};
use std::collections::HashMap;

/// Which orbit representation a layout (and everything built on it) uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ordered,
    Lumped,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Ordered => write!(f, "ordered"),
            Mode::Lumped => write!(f, "lumped"),
        }
    }
}

/// Alphabet sizes of the five coordinate groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceDims {
    pub arrival: usize,
    pub handoff: usize,
    pub new_call: usize,
    pub retrial: usize,
    pub channels: usize,
}

impl SpaceDims {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            arrival: cfg.arrivals.phases(),
            handoff: cfg.service_handoff.phases(),
            new_call: cfg.service_new.phases(),
            retrial: cfg.retrial.phases(),
            channels: cfg.channels,
        }
    }
}

/// One `(kappa, j)` segment of a level layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kappa: usize,
    pub j: usize,
    /// Flat index of the segment's first state.
    pub offset: usize,
    /// `L * M_h^j * M_n^(kappa-j)`.
    pub phase_width: usize,
    /// `phase_width * orbit_dim`.
    pub width: usize,
}

/// Index layout of one orbit level.
#[derive(Debug, Clone)]
pub struct LevelLayout {
    pub level: usize,
    pub mode: Mode,
    pub dims: SpaceDims,
    pub orbit_dim: usize,
    pub total: usize,
    segments: Vec<Segment>,
    /// Lumped mode only: occupancy vectors in colex order plus reverse lookup.
    occupancies: Option<(Vec<Vec<usize>>, HashMap<Vec<usize>, usize>)>,
}

/// Orbit coordinate of a single state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrbitCoord {
    /// Retrial phase of each orbiting customer, oldest first.
    Ordered(Vec<usize>),
    /// Number of orbiting customers per retrial phase.
    Lumped(Vec<usize>),
}

/// Fully decoded state coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateCoord {
    pub level: usize,
    pub kappa: usize,
    pub j: usize,
    pub v: usize,
    pub s_h: Vec<usize>,
    pub s_n: Vec<usize>,
    pub orbit: OrbitCoord,
}

/// Compositions of `total` into `parts` nonnegative integers, colex order.
fn occupancy_vectors(parts: usize, total: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; parts];
    fn rec(out: &mut Vec<Vec<usize>>, current: &mut Vec<usize>, pos: usize, remaining: usize) {
        if pos + 1 == current.len() {
            current[pos] = remaining;
            out.push(current.clone());
            return;
        }
        for v in 0..=remaining {
            current[pos] = v;
            rec(out, current, pos + 1, remaining - v);
        }
    }
    if parts == 0 {
        return vec![vec![]];
    }
    rec(&mut out, &mut current, 0, total);
    out.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
    out
}

/// `C(total + parts - 1, parts - 1)` with overflow checks.
fn occupancy_count(parts: usize, total: usize) -> Result<usize> {
    let mut acc: usize = 1;
    for i in 1..parts {
        acc = acc
            .checked_mul(total + i)
            .ok_or_else(|| Error::DimensionCap {
                what: "occupancy count".into(),
                rows: usize::MAX,
                cols: 1,
                cap: usize::MAX,
            })?
            / i;
    }
    Ok(acc)
}

impl LevelLayout {
    pub fn new(dims: SpaceDims, level: usize, mode: Mode) -> Result<Self> {
        let orbit_dim = match mode {
            Mode::Ordered => kron::checked_pow(dims.retrial, level, "ordered orbit space", usize::MAX)?,
            Mode::Lumped => occupancy_count(dims.retrial, level)?,
        };
        let occupancies = match mode {
            Mode::Ordered => None,
            Mode::Lumped => {
                let vecs = occupancy_vectors(dims.retrial, level);
                debug_assert_eq!(vecs.len(), orbit_dim);
                let lookup = vecs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), i))
                    .collect();
                Some((vecs, lookup))
            }
        };
        let mut segments = Vec::new();
        let mut offset = 0usize;
        for kappa in 0..=dims.channels {
            for j in 0..=kappa {
                let phase_width = dims
                    .arrival
                    .checked_mul(dims.handoff.pow(j as u32))
                    .and_then(|w| w.checked_mul(dims.new_call.pow((kappa - j) as u32)))
                    .ok_or_else(|| Error::DimensionCap {
                        what: format!("segment ({kappa},{j}) phase width"),
                        rows: usize::MAX,
                        cols: 1,
                        cap: usize::MAX,
                    })?;
                let width = phase_width.checked_mul(orbit_dim).ok_or_else(|| Error::DimensionCap {
                    what: format!("segment ({kappa},{j}) width"),
                    rows: usize::MAX,
                    cols: 1,
                    cap: usize::MAX,
                })?;
                segments.push(Segment {
                    kappa,
                    j,
                    offset,
                    phase_width,
                    width,
                });
                offset = offset.checked_add(width).ok_or_else(|| Error::DimensionCap {
                    what: "level dimension".into(),
                    rows: usize::MAX,
                    cols: 1,
                    cap: usize::MAX,
                })?;
            }
        }
        Ok(Self {
            level,
            mode,
            dims,
            orbit_dim,
            total: offset,
            segments,
            occupancies,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, kappa: usize, j: usize) -> &Segment {
        // Segments are stored (kappa asc, j asc): index = kappa(kappa+1)/2 + j.
        &self.segments[kappa * (kappa + 1) / 2 + j]
    }

    /// Occupancy vector of an orbit index (counts per retrial phase, both modes).
    pub fn orbit_occupancy(&self, orbit_idx: usize) -> Vec<usize> {
        match &self.occupancies {
            Some((vecs, _)) => vecs[orbit_idx].clone(),
            None => {
                let mut counts = vec![0usize; self.dims.retrial];
                let mut rest = orbit_idx;
                for _ in 0..self.level {
                    counts[rest % self.dims.retrial] += 1;
                    rest /= self.dims.retrial;
                }
                counts
            }
        }
    }

    pub(crate) fn occupancy_index(&self, occ: &[usize]) -> usize {
        self.occupancies
            .as_ref()
            .expect("occupancy_index is lumped-mode only")
            .1[occ]
    }

    pub(crate) fn occupancy_vectors(&self) -> &[Vec<usize>] {
        &self.occupancies.as_ref().expect("lumped-mode only").0
    }

    pub fn encode(&self, c: &StateCoord) -> Result<usize> {
        let d = &self.dims;
        if c.level != self.level || c.kappa > d.channels || c.j > c.kappa {
            return Err(Error::InvalidArgument(format!(
                "coordinate {c:?} is outside this layout (level {}, channels {})",
                self.level, d.channels
            )));
        }
        if c.v >= d.arrival || c.s_h.len() != c.j || c.s_n.len() != c.kappa - c.j {
            return Err(Error::InvalidArgument(format!("coordinate {c:?} has bad phase tuple")));
        }
        let mut phase = c.v;
        for &p in &c.s_h {
            if p >= d.handoff {
                return Err(Error::InvalidArgument(format!("handoff phase {p} out of range")));
            }
            phase = phase * d.handoff + p;
        }
        for &p in &c.s_n {
            if p >= d.new_call {
                return Err(Error::InvalidArgument(format!("new-call phase {p} out of range")));
            }
            phase = phase * d.new_call + p;
        }
        let orbit = match (&c.orbit, self.mode) {
            (OrbitCoord::Ordered(tuple), Mode::Ordered) => {
                if tuple.len() != self.level {
                    return Err(Error::InvalidArgument("orbit tuple length != level".into()));
                }
                let mut idx = 0usize;
                for &r in tuple {
                    if r >= d.retrial {
                        return Err(Error::InvalidArgument(format!("retrial phase {r} out of range")));
                    }
                    idx = idx * d.retrial + r;
                }
                idx
            }
            (OrbitCoord::Lumped(occ), Mode::Lumped) => {
                if occ.len() != d.retrial || occ.iter().sum::<usize>() != self.level {
                    return Err(Error::InvalidArgument("occupancy must sum to the level".into()));
                }
                *self
                    .occupancies
                    .as_ref()
                    .expect("lumped layout")
                    .1
                    .get(occ.as_slice())
                    .ok_or_else(|| Error::InvalidArgument("unknown occupancy vector".into()))?
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "orbit coordinate kind does not match layout mode".into(),
                ))
            }
        };
        let seg = self.segment(c.kappa, c.j);
        Ok(seg.offset + phase * self.orbit_dim + orbit)
    }

    pub fn decode(&self, idx: usize) -> Result<StateCoord> {
        if idx >= self.total {
            return Err(Error::InvalidArgument(format!(
                "index {idx} out of range for level dimension {}",
                self.total
            )));
        }
        let seg = *self
            .segments
            .iter()
            .rev()
            .find(|s| s.offset <= idx)
            .expect("segments cover the range");
        let within = idx - seg.offset;
        let mut phase = within / self.orbit_dim;
        let orbit_idx = within % self.orbit_dim;
        let d = &self.dims;
        let mut s_n = vec![0usize; seg.kappa - seg.j];
        for slot in s_n.iter_mut().rev() {
            *slot = phase % d.new_call;
            phase /= d.new_call;
        }
        let mut s_h = vec![0usize; seg.j];
        for slot in s_h.iter_mut().rev() {
            *slot = phase % d.handoff;
            phase /= d.handoff;
        }
        let v = phase;
        let orbit = match self.mode {
            Mode::Ordered => {
                let mut tuple = vec![0usize; self.level];
                let mut rest = orbit_idx;
                for slot in tuple.iter_mut().rev() {
                    *slot = rest % d.retrial;
                    rest /= d.retrial;
                }
                OrbitCoord::Ordered(tuple)
            }
            Mode::Lumped => OrbitCoord::Lumped(self.orbit_occupancy(orbit_idx)),
        };
        Ok(StateCoord {
            level: self.level,
            kappa: seg.kappa,
            j: seg.j,
            v,
            s_h,
            s_n,
            orbit,
        })
    }
}

/// 0/1 aggregation matrix from the ordered to the lumped layout of one level:
/// `V[i, j] = 1` iff ordered state `i` has the occupancy and phase coordinates
/// of lumped state `j`. Column sums are the multinomial arrangement counts of
/// the corresponding occupancies.
pub fn lump_matrix(dims: SpaceDims, level: usize, cap: usize) -> Result<Matrix> {
    let ordered = LevelLayout::new(dims, level, Mode::Ordered)?;
    let lumped = LevelLayout::new(dims, level, Mode::Lumped)?;
    kron::check_cap("lump matrix", ordered.total, lumped.total, cap)?;
    let mut v = Matrix::zeros(ordered.total, lumped.total);
    // Orbit tuple -> occupancy class, shared by every segment.
    let mut orbit_map = vec![0usize; ordered.orbit_dim];
    for (tuple_idx, slot) in orbit_map.iter_mut().enumerate() {
        let occ = ordered.orbit_occupancy(tuple_idx);
        *slot = lumped.occupancy_index(&occ);
    }
    for (seg_o, seg_l) in ordered.segments().iter().zip(lumped.segments()) {
        debug_assert_eq!((seg_o.kappa, seg_o.j), (seg_l.kappa, seg_l.j));
        for phase in 0..seg_o.phase_width {
            for (tuple_idx, &class) in orbit_map.iter().enumerate() {
                let row = seg_o.offset + phase * ordered.orbit_dim + tuple_idx;
                let col = seg_l.offset + phase * lumped.orbit_dim + class;
                v[(row, col)] = 1.0;
            }
        }
    }
    Ok(v)
}

/// The five orbit-factor operators the generator needs, in either
/// representation. Dimensions are `W(level)` rows and `W(level')` columns with
/// `W` the representation's orbit dimension.
pub(crate) trait OrbitOps {
    fn orbit_dim(&self, level: usize) -> Result<usize>;
    /// Retrial phase evolution, `W(l) x W(l)` sub-generator.
    fn evolve(&self, level: usize) -> Result<Matrix>;
    /// Failed retrial attempts (retry exit, fresh initial phase), `W(l) x W(l)`.
    fn failed_retry(&self, level: usize) -> Result<Matrix>;
    /// One customer abandons, `W(l) x W(l-1)`; `level >= 1`.
    fn abandon(&self, level: usize) -> Result<Matrix>;
    /// One customer connects and starts a new-call service phase (drawn from
    /// `beta_new`), `W(l) x (len(beta_new) * W(l-1))`; the service factor is
    /// the slower column index. `level >= 1`.
    fn success(&self, level: usize, beta_new: &[f64]) -> Result<Matrix>;
    /// One customer joins in a fresh initial phase, `W(l) x W(l+1)`.
    fn join(&self, level: usize) -> Result<Matrix>;
}

/// Literal tuple representation: operators are the Kronecker position sums.
pub(crate) struct OrderedOrbit<'a> {
    pub r: &'a RetrialPh,
    pub cap: usize,
}

impl OrbitOps for OrderedOrbit<'_> {
    fn orbit_dim(&self, level: usize) -> Result<usize> {
        kron::checked_pow(self.r.phases(), level, "ordered orbit space", self.cap)
    }

    fn evolve(&self, level: usize) -> Result<Matrix> {
        kron::psi_orbit(self.r, level, self.cap)
    }

    fn failed_retry(&self, level: usize) -> Result<Matrix> {
        kron::psi_orbit_failed(self.r, level, self.cap)
    }

    fn abandon(&self, level: usize) -> Result<Matrix> {
        kron::phi_orbit_leave(self.r, level, self.cap)
    }

    fn success(&self, level: usize, beta_new: &[f64]) -> Result<Matrix> {
        kron::phi_orbit_success(self.r, beta_new, level, self.cap)
    }

    fn join(&self, level: usize) -> Result<Matrix> {
        let id = Matrix::identity(self.orbit_dim(level)?, self.orbit_dim(level)?);
        kron::kron_product(&id, &kron::row(&self.r.gamma), self.cap)
    }
}

/// Occupancy-count representation: rates scale with how many customers sit in
/// the acting phase.
pub(crate) struct LumpedOrbit<'a> {
    pub r: &'a RetrialPh,
    pub cap: usize,
}

impl LumpedOrbit<'_> {
    fn layouts(&self, level: usize) -> (Vec<Vec<usize>>, HashMap<Vec<usize>, usize>) {
        let vecs = occupancy_vectors(self.r.phases(), level);
        let lookup = vecs.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        (vecs, lookup)
    }
}

impl OrbitOps for LumpedOrbit<'_> {
    fn orbit_dim(&self, level: usize) -> Result<usize> {
        occupancy_count(self.r.phases(), level)
    }

    fn evolve(&self, level: usize) -> Result<Matrix> {
        let (states, lookup) = self.layouts(level);
        let w = states.len();
        kron::check_cap("lumped orbit evolution", w, w, self.cap)?;
        let n = self.r.phases();
        let mut out = Matrix::zeros(w, w);
        for (i, occ) in states.iter().enumerate() {
            for from in 0..n {
                if occ[from] == 0 {
                    continue;
                }
                let count = occ[from] as f64;
                out[(i, i)] += count * self.r.transition[(from, from)];
                for to in 0..n {
                    if to == from {
                        continue;
                    }
                    let rate = count * self.r.transition[(from, to)];
                    if rate == 0.0 {
                        continue;
                    }
                    let mut next = occ.clone();
                    next[from] -= 1;
                    next[to] += 1;
                    out[(i, lookup[&next])] += rate;
                }
            }
        }
        Ok(out)
    }

    fn failed_retry(&self, level: usize) -> Result<Matrix> {
        let (states, lookup) = self.layouts(level);
        let w = states.len();
        kron::check_cap("lumped failed-retry operator", w, w, self.cap)?;
        let n = self.r.phases();
        let mut out = Matrix::zeros(w, w);
        for (i, occ) in states.iter().enumerate() {
            for from in 0..n {
                if occ[from] == 0 {
                    continue;
                }
                let base = occ[from] as f64 * self.r.exit_retry[from];
                if base == 0.0 {
                    continue;
                }
                for (to, &g) in self.r.gamma.iter().enumerate() {
                    let rate = base * g;
                    if rate == 0.0 {
                        continue;
                    }
                    let mut next = occ.clone();
                    next[from] -= 1;
                    next[to] += 1;
                    out[(i, lookup[&next])] += rate;
                }
            }
        }
        Ok(out)
    }

    fn abandon(&self, level: usize) -> Result<Matrix> {
        let (states, _) = self.layouts(level);
        let (prev, prev_lookup) = self.layouts(level - 1);
        let _ = prev;
        let w = states.len();
        let w_prev = occupancy_count(self.r.phases(), level - 1)?;
        kron::check_cap("lumped abandon operator", w, w_prev, self.cap)?;
        let mut out = Matrix::zeros(w, w_prev);
        for (i, occ) in states.iter().enumerate() {
            for (from, &rate) in self.r.exit_leave.iter().enumerate() {
                if occ[from] == 0 || rate == 0.0 {
                    continue;
                }
                let mut next = occ.clone();
                next[from] -= 1;
                out[(i, prev_lookup[&next])] += occ[from] as f64 * rate;
            }
        }
        Ok(out)
    }

    fn success(&self, level: usize, beta_new: &[f64]) -> Result<Matrix> {
        let (states, _) = self.layouts(level);
        let (_, prev_lookup) = self.layouts(level - 1);
        let w = states.len();
        let w_prev = occupancy_count(self.r.phases(), level - 1)?;
        let mn = beta_new.len();
        let cols = mn
            .checked_mul(w_prev)
            .ok_or_else(|| Error::DimensionCap {
                what: "lumped success operator".into(),
                rows: w,
                cols: usize::MAX,
                cap: self.cap,
            })?;
        kron::check_cap("lumped success operator", w, cols, self.cap)?;
        let mut out = Matrix::zeros(w, cols);
        for (i, occ) in states.iter().enumerate() {
            for (from, &rate) in self.r.exit_retry.iter().enumerate() {
                if occ[from] == 0 || rate == 0.0 {
                    continue;
                }
                let mut next = occ.clone();
                next[from] -= 1;
                let surviving = prev_lookup[&next];
                let base = occ[from] as f64 * rate;
                for (m, &b) in beta_new.iter().enumerate() {
                    if b != 0.0 {
                        out[(i, m * w_prev + surviving)] += base * b;
                    }
                }
            }
        }
        Ok(out)
    }

    fn join(&self, level: usize) -> Result<Matrix> {
        let (states, _) = self.layouts(level);
        let (_, next_lookup) = self.layouts(level + 1);
        let w = states.len();
        let w_next = occupancy_count(self.r.phases(), level + 1)?;
        kron::check_cap("lumped join operator", w, w_next, self.cap)?;
        let mut out = Matrix::zeros(w, w_next);
        for (i, occ) in states.iter().enumerate() {
            for (to, &g) in self.r.gamma.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let mut next = occ.clone();
                next[to] += 1;
                out[(i, next_lookup[&next])] += g;
            }
        }
        Ok(out)
    }
}
