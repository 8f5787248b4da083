//! The three stochastic ingredients of the queueing model and their
//! fundamental rates: a marked Markovian arrival process for the two call
//! classes, two phase-type service laws, and a phase-type retrial law with
//! separate abandon and retry exits.

use crate::error::{Error, Result};
use crate::kron::Matrix;
use crate::linalg::{communicating_classes, left_null_vector};

/// Two-class marked Markovian arrival process.
///
/// `c0` carries phase transitions without an arrival, `c_new` / `c_handoff`
/// transitions marked by a new-call / handoff-call arrival. Their sum is an
/// irreducible conservative generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedMap {
    pub c0: Matrix,
    pub c_new: Matrix,
    pub c_handoff: Matrix,
}

impl MarkedMap {
    pub fn new(c0: Matrix, c_new: Matrix, c_handoff: Matrix) -> Self {
        Self { c0, c_new, c_handoff }
    }

    /// One-phase process: Poisson arrivals of both classes.
    pub fn poisson(lambda_new: f64, lambda_handoff: f64) -> Self {
        Self {
            c0: Matrix::from_element(1, 1, -(lambda_new + lambda_handoff)),
            c_new: Matrix::from_element(1, 1, lambda_new),
            c_handoff: Matrix::from_element(1, 1, lambda_handoff),
        }
    }

    pub fn phases(&self) -> usize {
        self.c0.nrows()
    }

    /// The full background generator `c0 + c_new + c_handoff`.
    pub fn total_generator(&self) -> Matrix {
        &self.c0 + &self.c_new + &self.c_handoff
    }
}

/// Phase-type law `(beta, transition)`; the exit vector is derived so that
/// `transition * e + exit = 0` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseType {
    pub beta: Vec<f64>,
    pub transition: Matrix,
    pub exit: Vec<f64>,
}

impl PhaseType {
    pub fn new(beta: Vec<f64>, transition: Matrix) -> Self {
        let exit = (0..transition.nrows())
            .map(|i| -transition.row(i).sum())
            .collect();
        Self { beta, transition, exit }
    }

    /// Single-phase exponential law with the given rate.
    pub fn exponential(rate: f64) -> Self {
        Self::new(vec![1.0], Matrix::from_element(1, 1, -rate))
    }

    pub fn phases(&self) -> usize {
        self.transition.nrows()
    }

    /// Uniform rescaling of all transition rates: the mean service rate scales
    /// by the same factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.beta.clone(), &self.transition * factor)
    }
}

/// Phase-type retrial law with two absorption exits: `exit_leave` ends the
/// retrial (the customer abandons the system), `exit_retry` triggers a retrial
/// attempt. `transition * e + exit_leave + exit_retry = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrialPh {
    pub gamma: Vec<f64>,
    pub transition: Matrix,
    pub exit_leave: Vec<f64>,
    pub exit_retry: Vec<f64>,
}

impl RetrialPh {
    pub fn new(gamma: Vec<f64>, transition: Matrix, exit_leave: Vec<f64>, exit_retry: Vec<f64>) -> Self {
        Self { gamma, transition, exit_leave, exit_retry }
    }

    /// Single-phase law: abandon at `leave_rate`, attempt retrials at `retry_rate`.
    pub fn exponential(leave_rate: f64, retry_rate: f64) -> Self {
        Self {
            gamma: vec![1.0],
            transition: Matrix::from_element(1, 1, -(leave_rate + retry_rate)),
            exit_leave: vec![leave_rate],
            exit_retry: vec![retry_rate],
        }
    }

    pub fn phases(&self) -> usize {
        self.transition.nrows()
    }

    /// Uniform rescaling of the whole law (transitions and both exits): the
    /// mean retrial rate scales by the same factor, the exit split is kept.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            gamma: self.gamma.clone(),
            transition: &self.transition * factor,
            exit_leave: self.exit_leave.iter().map(|v| v * factor).collect(),
            exit_retry: self.exit_retry.iter().map(|v| v * factor).collect(),
        }
    }
}

/// How the orbit level set is truncated for computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationPolicy {
    /// Solve with exactly this top level.
    Fixed(usize),
    /// Grow the top level until every reported measure moves by at most
    /// `epsilon` and the top-level mass drops below `epsilon`; fail loudly at
    /// `cap`.
    Adaptive { epsilon: f64, cap: usize },
}

impl TruncationPolicy {
    pub fn default_adaptive() -> Self {
        TruncationPolicy::Adaptive { epsilon: 1e-5, cap: 60 }
    }
}

/// A complete, validated model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arrivals: MarkedMap,
    pub service_handoff: PhaseType,
    pub service_new: PhaseType,
    pub retrial: RetrialPh,
    /// Number of identical channels.
    pub channels: usize,
    pub truncation: TruncationPolicy,
    /// Tolerance on the arrival generator's row sums during validation.
    pub row_sum_tol: f64,
}

impl ModelConfig {
    /// Validates and returns the config, or the full violation report.
    pub fn validated(self) -> Result<Self> {
        let report = validate(&self);
        if report.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(report.to_string()))
        }
    }
}

/// Everything `validate` found wrong, one line per violation.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(msg());
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            write!(f, "(no violations)")
        } else {
            write!(f, "{}", self.violations.join("\n"))
        }
    }
}

/// Stationary phase vector of the arrival background chain: the unique
/// probability row vector with `pi * C = 0` for `C = c0 + c_new + c_handoff`.
pub fn stationary_vector(m: &MarkedMap) -> Result<Vec<f64>> {
    let c = m.total_generator();
    let classes = communicating_classes(&c, 0.0);
    if classes.len() != 1 {
        return Err(Error::Irreducible {
            context: "arrival process generator".into(),
            classes,
        });
    }
    left_null_vector(&c, 1e-10, "arrival process stationary vector")
}

/// Fundamental arrival rates `(handoff, new, total)`; the total is the exact
/// sum of the two class rates.
pub fn fundamental_rates(m: &MarkedMap) -> Result<(f64, f64, f64)> {
    let pi = stationary_vector(m)?;
    let weighted = |mat: &Matrix| -> f64 {
        pi.iter()
            .enumerate()
            .map(|(i, &p)| p * mat.row(i).sum())
            .sum()
    };
    let lambda_h = weighted(&m.c_handoff);
    let lambda_n = weighted(&m.c_new);
    Ok((lambda_h, lambda_n, lambda_h + lambda_n))
}

/// Mean service (or absorption) rate of a phase-type law:
/// `1 / mean absorption time`.
pub fn ph_mean_rate(p: &PhaseType) -> Result<f64> {
    mean_rate_of(&p.beta, &p.transition, "service phase-type law")
}

/// Mean retrial rate of the retrial law (both exits count as absorption).
pub fn retrial_mean_rate(r: &RetrialPh) -> Result<f64> {
    mean_rate_of(&r.gamma, &r.transition, "retrial phase-type law")
}

fn mean_rate_of(init: &[f64], transition: &Matrix, context: &str) -> Result<f64> {
    let n = transition.nrows();
    let ones = Matrix::from_element(n, 1, 1.0);
    let y = transition.clone().lu().solve(&ones).ok_or_else(|| Error::Singular {
        context: context.to_string(),
    })?;
    let mean: f64 = -init.iter().zip(y.iter()).map(|(&b, &v)| b * v).sum::<f64>();
    if !(mean > 0.0) {
        return Err(Error::Singular {
            context: format!("{context}: nonpositive mean absorption time {mean}"),
        });
    }
    Ok(1.0 / mean)
}

/// Checks every invariant of the model and reports each violation with its
/// matrix coordinates. An empty report means the config is admissible.
pub fn validate(cfg: &ModelConfig) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let m = &cfg.arrivals;
    let l = m.phases();

    rep.check(cfg.channels >= 1, || "system: channels must be >= 1".into());
    if let TruncationPolicy::Adaptive { epsilon, cap } = cfg.truncation {
        rep.check(epsilon > 0.0, || format!("system: truncation epsilon {epsilon} must be > 0"));
        rep.check(cap >= 1, || "system: truncation cap must be >= 1".into());
    }

    for (name, mat) in [("c0", &m.c0), ("c_new", &m.c_new), ("c_handoff", &m.c_handoff)] {
        rep.check(mat.nrows() == l && mat.ncols() == l, || {
            format!("mmap: {name} is {}x{}, expected {l}x{l}", mat.nrows(), mat.ncols())
        });
    }
    if m.c_new.shape() == (l, l) && m.c_handoff.shape() == (l, l) {
        for i in 0..l {
            for j in 0..l {
                if i != j {
                    rep.check(m.c0[(i, j)] >= 0.0, || {
                        format!("mmap: c0[{i},{j}] = {} must be >= 0 off the diagonal", m.c0[(i, j)])
                    });
                }
                rep.check(m.c_new[(i, j)] >= 0.0, || {
                    format!("mmap: c_new[{i},{j}] = {} must be >= 0", m.c_new[(i, j)])
                });
                rep.check(m.c_handoff[(i, j)] >= 0.0, || {
                    format!("mmap: c_handoff[{i},{j}] = {} must be >= 0", m.c_handoff[(i, j)])
                });
            }
            rep.check(m.c0[(i, i)] < 0.0, || {
                format!("mmap: c0[{i},{i}] = {} must be strictly negative", m.c0[(i, i)])
            });
        }
        let c = m.total_generator();
        for i in 0..l {
            let s = c.row(i).sum();
            rep.check(s.abs() <= cfg.row_sum_tol, || {
                format!(
                    "mmap: row {i} of c0+c_new+c_handoff sums to {s:.6e}, tolerance {:.1e}",
                    cfg.row_sum_tol
                )
            });
        }
        let classes = communicating_classes(&c, 0.0);
        rep.check(classes.len() == 1, || {
            format!("mmap: generator is reducible, communicating classes {classes:?}")
        });
    }

    validate_ph(&mut rep, "service_h", &cfg.service_handoff);
    validate_ph(&mut rep, "service_n", &cfg.service_new);
    validate_retrial(&mut rep, &cfg.retrial);
    rep
}

fn validate_ph(rep: &mut ValidationReport, name: &str, p: &PhaseType) {
    let n = p.phases();
    rep.check(p.beta.len() == n, || {
        format!("{name}: beta has {} entries, expected {n}", p.beta.len())
    });
    rep.check(p.transition.ncols() == n, || format!("{name}: transition matrix is not square"));
    let sum: f64 = p.beta.iter().sum();
    rep.check((sum - 1.0).abs() <= 1e-12, || format!("{name}: beta row sum {sum} != 1"));
    for (i, &b) in p.beta.iter().enumerate() {
        rep.check(b >= 0.0, || format!("{name}: beta[{i}] = {b} must be >= 0"));
    }
    if p.transition.ncols() != n {
        return;
    }
    for i in 0..n {
        rep.check(p.transition[(i, i)] < 0.0, || {
            format!("{name}: transition[{i},{i}] = {} must be strictly negative", p.transition[(i, i)])
        });
        for j in 0..n {
            if i != j {
                rep.check(p.transition[(i, j)] >= 0.0, || {
                    format!("{name}: transition[{i},{j}] = {} must be >= 0", p.transition[(i, j)])
                });
            }
        }
        rep.check(p.exit[i] >= -1e-12, || {
            format!("{name}: exit[{i}] = {} must be >= 0 (row {i} sums above 0)", p.exit[i])
        });
        let balance = p.transition.row(i).sum() + p.exit[i];
        rep.check(balance.abs() <= 1e-12, || {
            format!("{name}: transition row {i} plus exit leaves {balance:.3e}, must vanish")
        });
    }
    rep.check(
        p.transition.clone().lu().is_invertible(),
        || format!("{name}: transition matrix is singular"),
    );
}

fn validate_retrial(rep: &mut ValidationReport, r: &RetrialPh) {
    let n = r.phases();
    let name = "retrial";
    rep.check(r.gamma.len() == n, || {
        format!("{name}: gamma has {} entries, expected {n}", r.gamma.len())
    });
    rep.check(r.exit_leave.len() == n && r.exit_retry.len() == n, || {
        format!("{name}: exit vectors must have {n} entries")
    });
    let sum: f64 = r.gamma.iter().sum();
    rep.check((sum - 1.0).abs() <= 1e-12, || format!("{name}: gamma row sum {sum} != 1"));
    for (i, &g) in r.gamma.iter().enumerate() {
        rep.check(g >= 0.0, || format!("{name}: gamma[{i}] = {g} must be >= 0"));
    }
    if r.transition.ncols() != n || r.exit_leave.len() != n || r.exit_retry.len() != n {
        return;
    }
    for i in 0..n {
        rep.check(r.transition[(i, i)] < 0.0, || {
            format!("{name}: transition[{i},{i}] = {} must be strictly negative", r.transition[(i, i)])
        });
        for j in 0..n {
            if i != j {
                rep.check(r.transition[(i, j)] >= 0.0, || {
                    format!("{name}: transition[{i},{j}] = {} must be >= 0", r.transition[(i, j)])
                });
            }
        }
        rep.check(r.exit_leave[i] >= 0.0, || {
            format!("{name}: exit_leave[{i}] = {} must be >= 0", r.exit_leave[i])
        });
        rep.check(r.exit_retry[i] >= 0.0, || {
            format!("{name}: exit_retry[{i}] = {} must be >= 0", r.exit_retry[i])
        });
        let balance = r.transition.row(i).sum() + r.exit_leave[i] + r.exit_retry[i];
        rep.check(balance.abs() <= 1e-12, || {
            format!("{name}: transition row {i} plus both exits leaves {balance:.3e}, must vanish")
        });
    }
    rep.check(
        r.transition.clone().lu().is_invertible(),
        || format!("{name}: transition matrix is singular"),
    );
}

#[cfg(test)]
pub mod test_support {
    //! Deterministic pseudo-random model builders for property tests.

    use super::*;

    pub struct SplitMix(pub u64);

    impl SplitMix {
        pub fn next_u64(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        }

        pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            lo + u * (hi - lo)
        }
    }

    fn simplex(rng: &mut SplitMix, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mut v: Vec<f64> = raw.iter().map(|x| x / s).collect();
        // Force an exact unit sum.
        let tail: f64 = v[..n - 1].iter().sum();
        v[n - 1] = 1.0 - tail;
        v
    }

    pub fn random_ph(n: usize, seed: u64) -> PhaseType {
        let mut rng = SplitMix(seed);
        let beta = simplex(&mut rng, n);
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            let mut total = 0.0;
            for j in 0..n {
                if i != j {
                    let v = rng.uniform(0.0, 1.0);
                    a[(i, j)] = v;
                    total += v;
                }
            }
            let exit = rng.uniform(0.1, 2.0);
            a[(i, i)] = -(total + exit);
        }
        PhaseType::new(beta, a)
    }

    pub fn random_retrial(n: usize, seed: u64) -> RetrialPh {
        let mut rng = SplitMix(seed ^ 0xdead_beef);
        let gamma = simplex(&mut rng, n);
        let mut t = Matrix::zeros(n, n);
        let mut leave = vec![0.0; n];
        let mut retry = vec![0.0; n];
        for i in 0..n {
            let mut total = 0.0;
            for j in 0..n {
                if i != j {
                    let v = rng.uniform(0.0, 1.5);
                    t[(i, j)] = v;
                    total += v;
                }
            }
            leave[i] = rng.uniform(0.05, 1.0);
            retry[i] = rng.uniform(0.05, 1.5);
            t[(i, i)] = -(total + leave[i] + retry[i]);
        }
        RetrialPh::new(gamma, t, leave, retry)
    }

    pub fn random_mmap(l: usize, seed: u64) -> MarkedMap {
        let mut rng = SplitMix(seed ^ 0x5ca1ab1e);
        let mut c0 = Matrix::zeros(l, l);
        let mut cn = Matrix::zeros(l, l);
        let mut ch = Matrix::zeros(l, l);
        for i in 0..l {
            let mut total = 0.0;
            for j in 0..l {
                if i != j {
                    // A ring underlay keeps the chain irreducible.
                    let base = if j == (i + 1) % l { 0.2 } else { 0.0 };
                    let v = base + rng.uniform(0.0, 1.0);
                    c0[(i, j)] = v;
                    total += v;
                }
                let vn = rng.uniform(0.0, 1.2);
                let vh = rng.uniform(0.0, 1.2);
                cn[(i, j)] = vn;
                ch[(i, j)] = vh;
                total += vn + vh;
            }
            c0[(i, i)] = -total;
        }
        MarkedMap::new(c0, cn, ch)
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::config;
    use crate::kron::from_rows;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Exp;

    #[test]
    fn stationary_one_phase_is_unit() {
        let m = MarkedMap::poisson(0.4, 0.6);
        assert_eq!(stationary_vector(&m).unwrap(), vec![1.0]);
    }

    #[test]
    fn section5_handoff_rate_is_one() {
        let cfg = config::preset("section5").unwrap();
        let (lh, ln, total) = fundamental_rates(&cfg.arrivals).unwrap();
        assert_abs_diff_eq!(lh, 1.0, epsilon = 5e-3);
        assert_abs_diff_eq!(ln, 1.0, epsilon = 5e-3);
        assert_abs_diff_eq!(total, lh + ln, epsilon = 0.0);
    }

    #[test]
    fn stationary_matches_dense_nullspace_oracle() {
        // Independent route: smallest-singular-vector of C^T via SVD.
        let m = random_mmap(3, 42);
        let pi = stationary_vector(&m).unwrap();
        let c = m.total_generator();
        let svd = c.transpose().svd(true, true);
        let v_t = svd.v_t.as_ref().unwrap();
        let idx = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let mut oracle: Vec<f64> = (0..3).map(|i| v_t[(idx, i)]).collect();
        let s: f64 = oracle.iter().sum();
        for v in &mut oracle {
            *v /= s;
        }
        for (a, b) in pi.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let residual = crate::kron::row(&pi) * &c;
        assert!(residual.amax() <= 1e-10);
    }

    #[test]
    fn rates_of_zero_handoff_matrix_vanish() {
        let l = 2;
        let mut m = random_mmap(l, 7);
        // Fold the handoff rates back into c0 so the generator stays balanced.
        for i in 0..l {
            m.c0[(i, i)] += m.c_handoff.row(i).sum();
            for j in 0..l {
                m.c_handoff[(i, j)] = 0.0;
            }
        }
        let (lh, _, _) = fundamental_rates(&m).unwrap();
        assert_eq!(lh, 0.0);
    }

    #[test]
    fn rates_match_direct_product_and_split_identity() {
        let m = random_mmap(3, 99);
        let pi = stationary_vector(&m).unwrap();
        let (lh, ln, total) = fundamental_rates(&m).unwrap();
        let direct: f64 = (0..3).map(|i| pi[i] * m.c_handoff.row(i).sum()).sum();
        assert_abs_diff_eq!(lh, direct, epsilon = 1e-14);
        let both: f64 = (0..3)
            .map(|i| pi[i] * (m.c_new.row(i).sum() + m.c_handoff.row(i).sum()))
            .sum();
        assert_abs_diff_eq!(total, both, epsilon = 1e-12);
        assert!(lh >= 0.0 && ln >= 0.0);
    }

    #[test]
    fn erlang2_mean_rate_is_half() {
        let p = PhaseType::new(vec![1.0, 0.0], from_rows(&[vec![-1.0, 1.0], vec![0.0, -1.0]]));
        assert_abs_diff_eq!(ph_mean_rate(&p).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn exponential_mean_rate_is_the_rate() {
        assert_eq!(ph_mean_rate(&PhaseType::exponential(2.0)).unwrap(), 2.0);
        assert_abs_diff_eq!(ph_mean_rate(&PhaseType::exponential(1.7)).unwrap(), 1.7, epsilon = 1e-15);
    }

    #[test]
    fn mean_rate_is_permutation_invariant() {
        let p = random_ph(3, 5);
        let perm = [2usize, 0, 1];
        let beta: Vec<f64> = perm.iter().map(|&i| p.beta[i]).collect();
        let a = Matrix::from_fn(3, 3, |i, j| p.transition[(perm[i], perm[j])]);
        let q = PhaseType::new(beta, a);
        assert_abs_diff_eq!(ph_mean_rate(&p).unwrap(), ph_mean_rate(&q).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn section5_retrial_rate() {
        let r = RetrialPh::new(
            vec![0.5, 0.5],
            from_rows(&[vec![-2.0, 2.0], vec![0.0, -2.0]]),
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        );
        assert_abs_diff_eq!(retrial_mean_rate(&r).unwrap(), 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(retrial_mean_rate(&RetrialPh::exponential(0.0, 1.5)).unwrap(), 1.5);
    }

    /// Monte Carlo absorption-time oracle for a phase-type law.
    fn mc_mean_absorption(
        init: &[f64],
        transition: &Matrix,
        samples: usize,
        seed: u64,
    ) -> (f64, f64) {
        let n = transition.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..samples {
            let mut t = 0.0;
            let mut phase = {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, &b) in init.iter().enumerate() {
                    acc += b;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            loop {
                let out_rate = -transition[(phase, phase)];
                t += Exp::new(out_rate).unwrap().sample(&mut rng);
                let u: f64 = rng.gen::<f64>() * out_rate;
                let mut acc = 0.0;
                let mut next = None;
                for j in 0..n {
                    if j != phase {
                        acc += transition[(phase, j)];
                        if u < acc {
                            next = Some(j);
                            break;
                        }
                    }
                }
                match next {
                    Some(j) => phase = j,
                    None => break, // absorbed
                }
            }
            sum += t;
            sumsq += t * t;
        }
        let mean = sum / samples as f64;
        let var = (sumsq / samples as f64 - mean * mean).max(0.0);
        (mean, (var / samples as f64).sqrt())
    }

    #[test]
    fn ph_mean_rate_matches_monte_carlo() {
        let p = random_ph(3, 123);
        let (mean, se) = mc_mean_absorption(&p.beta, &p.transition, 10_000_000, 7);
        let exact = 1.0 / ph_mean_rate(&p).unwrap();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "mc {mean} vs exact {exact}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn retrial_mean_rate_matches_monte_carlo() {
        let r = random_retrial(3, 321);
        let (mean, se) = mc_mean_absorption(&r.gamma, &r.transition, 10_000_000, 8);
        let exact = 1.0 / retrial_mean_rate(&r).unwrap();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "mc {mean} vs exact {exact}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn section5_preset_validates_clean() {
        let cfg = config::preset("section5").unwrap();
        let rep = validate(&cfg);
        assert!(rep.is_empty(), "unexpected violations:\n{rep}");
    }

    #[test]
    fn broken_beta_is_reported_with_value() {
        let mut cfg = config::preset("section5").unwrap();
        cfg.service_handoff.beta = vec![0.9, 0.0];
        let rep = validate(&cfg);
        assert!(rep.to_string().contains("beta row sum 0.9"), "report was:\n{rep}");
    }

    #[test]
    fn row_sum_tolerance_is_configurable() {
        // The printed arrival matrices only balance to ~6e-4.
        let mut cfg = config::preset("section5").unwrap();
        cfg.arrivals = config::section5_arrivals_as_printed();
        cfg.row_sum_tol = 1e-9;
        assert!(validate(&cfg).to_string().contains("sums to"));
        cfg.row_sum_tol = 1e-2;
        assert!(validate(&cfg).is_empty());
    }

    #[test]
    fn reducible_mmap_names_classes() {
        let m = MarkedMap::new(
            from_rows(&[vec![-1.0, 0.0], vec![0.0, -2.0]]),
            from_rows(&[vec![0.5, 0.0], vec![0.0, 1.0]]),
            from_rows(&[vec![0.5, 0.0], vec![0.0, 1.0]]),
        );
        match stationary_vector(&m) {
            Err(Error::Irreducible { classes, .. }) => {
                assert_eq!(classes.len(), 2);
            }
            other => panic!("expected irreducibility error, got {other:?}"),
        }
    }
}
