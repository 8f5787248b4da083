//! Channel-allocation optimization: minimize the channel count subject to
//! caps on the dropping and preemption probabilities, over the decision
//! variables `(channels, handoff arrival rate)`.
//!
//! Three heuristics are provided: an exhaustive direct search on a rate grid,
//! particle swarm optimization with a static quadratic penalty, and simulated
//! annealing with the same penalty. The handoff rate enters the model by
//! uniformly rescaling the handoff arrival matrix (diagonal-compensated in
//! the no-arrival matrix) with the achieved fundamental rate pinned to the
//! target by bisection; see [`crate::config::scale_to_handoff_rate`].
//!
//! `lambda_objective` selects between two readings of the rate variable:
//! `Free` leaves it unconstrained beyond feasibility (ties in the channel
//! count resolve arbitrarily, typically near the lower rate bound where the
//! constraints are slackest), `Max` adds a small reward for larger feasible
//! rates, the largest-admissible-load reading the direct search implements by
//! construction.

use crate::config::scale_to_class_rates;
use crate::error::{Error, Result};
use crate::measures;
use crate::model::ModelConfig;
use crate::solver::{self, SolveOptions};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaObjective {
    /// The rate is free: any feasible value ties at equal channel count.
    #[default]
    Free,
    /// Prefer the largest feasible rate at the minimal channel count.
    Max,
}

/// The constrained problem: everything but `(channels, lambda_handoff)` is
/// frozen in `base`.
#[derive(Debug, Clone)]
pub struct OptimizationProblem {
    pub base: ModelConfig,
    /// Dropping-probability cap.
    pub eps_dropping: f64,
    /// Preemption-probability cap.
    pub eps_preempt: f64,
    pub s_bounds: (usize, usize),
    pub lambda_bounds: (f64, f64),
    /// Direct-search rate grid step.
    pub grid_step: f64,
    pub lambda_objective: LambdaObjective,
    pub solve: SolveOptions,
}

impl OptimizationProblem {
    /// Defaults: channels in `[2, 6]`, rate in `[0.01, 2.5]`, grid step 0.025.
    ///
    /// Larger channel boxes need a raised block entry cap in `solve` — the
    /// per-level phase space grows exponentially with the channel count.
    pub fn new(base: ModelConfig, eps_dropping: f64, eps_preempt: f64) -> Self {
        let mut solve = SolveOptions::default();
        // Channel boxes beyond the desk scale need room: one level of the
        // 4-channel two-phase space at a deep truncation already exceeds the
        // conservative default block cap.
        solve.entry_cap = 16_000_000;
        Self {
            base,
            eps_dropping,
            eps_preempt,
            s_bounds: (2, 6),
            lambda_bounds: (0.01, 2.5),
            grid_step: 0.025,
            lambda_objective: LambdaObjective::default(),
            solve,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.eps_dropping > 0.0 && self.eps_dropping <= 1.0)
            || !(self.eps_preempt > 0.0 && self.eps_preempt <= 1.0)
        {
            return Err(Error::InvalidArgument(
                "constraint caps must lie in (0, 1]".into(),
            ));
        }
        if self.s_bounds.0 < 1 || self.s_bounds.0 > self.s_bounds.1 {
            return Err(Error::InvalidArgument(format!(
                "empty channel box {:?}",
                self.s_bounds
            )));
        }
        if !(self.lambda_bounds.0 > 0.0 && self.lambda_bounds.0 <= self.lambda_bounds.1) {
            return Err(Error::InvalidArgument(format!(
                "empty rate box {:?}",
                self.lambda_bounds
            )));
        }
        Ok(())
    }
}

/// One optimizer outcome, in the column order of the result tables.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub method: String,
    pub feasible: bool,
    /// Optimal channel count; the box's upper bound +1 sentinel never occurs —
    /// infeasible results keep the best penalized point with `feasible: false`.
    pub channels: usize,
    pub lambda_handoff: f64,
    pub p_dropping: f64,
    pub p_preempt: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Memoizing constraint evaluator; results are keyed by the channel count and
/// the rate quantized at 1e-9 (the bisection tolerance of the rate pin).
pub struct Evaluator<'a> {
    problem: &'a OptimizationProblem,
    base_lambda_new: f64,
    cache: Mutex<HashMap<(usize, i64), (f64, f64)>>,
    evaluations: AtomicUsize,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a OptimizationProblem) -> Self {
        let base_lambda_new = crate::model::fundamental_rates(&problem.base.arrivals)
            .map(|(_, ln, _)| ln)
            .unwrap_or(0.0);
        Self {
            problem,
            base_lambda_new,
            cache: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn key(lambda: f64) -> i64 {
        (lambda / 1e-9).round() as i64
    }

    /// Dropping and preemption probabilities at a point, memoized.
    pub fn evaluate(&self, channels: usize, lambda: f64) -> Result<(f64, f64)> {
        let key = (channels, Self::key(lambda));
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(*hit);
        }
        let value = self.evaluate_fresh(channels, lambda)?;
        self.cache.lock().unwrap().insert(key, value);
        Ok(value)
    }

    /// Uncached evaluation; used to re-verify reported optima.
    pub fn evaluate_fresh(&self, channels: usize, lambda: f64) -> Result<(f64, f64)> {
        let p = self.problem;
        if channels < p.s_bounds.0 || channels > p.s_bounds.1 {
            return Err(Error::InvalidArgument(format!(
                "channel count {channels} outside box {:?}",
                p.s_bounds
            )));
        }
        if lambda < p.lambda_bounds.0 - 1e-12 || lambda > p.lambda_bounds.1 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "rate {lambda} outside box {:?}",
                p.lambda_bounds
            )));
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut cfg = p.base.clone();
        cfg.channels = channels;
        // Pin both class rates: retargeting the handoff rate alone would let
        // the base new-call rate drift with the stationary phase shift.
        cfg.arrivals = scale_to_class_rates(&cfg.arrivals, self.base_lambda_new, lambda)?;
        let ss = solver::solve(&cfg, &p.solve).map_err(|e| match e {
            Error::NonConvergence { m_cap, measure_delta, tail_mass, epsilon } => Error::NonConvergence {
                m_cap,
                measure_delta,
                tail_mass,
                epsilon,
            },
            other => other,
        })?;
        let report = measures::evaluate(&ss, &cfg)?;
        Ok((
            report.p_dropping.unwrap_or(0.0),
            report.p_preempt.unwrap_or(0.0),
        ))
    }

    /// Penalized fitness for the metaheuristics.
    fn fitness(&self, channels: usize, lambda: f64) -> Result<(f64, f64, f64, bool)> {
        const PENALTY_RHO: f64 = 1e8;
        let p = self.problem;
        let (pd, pp) = self.evaluate(channels, lambda)?;
        let viol_d = (pd - p.eps_dropping).max(0.0);
        let viol_p = (pp - p.eps_preempt).max(0.0);
        let feasible = viol_d == 0.0 && viol_p == 0.0;
        let mut f = channels as f64 + PENALTY_RHO * (viol_d * viol_d + viol_p * viol_p);
        if p.lambda_objective == LambdaObjective::Max {
            // Strictly below one channel step, so it only breaks rate ties.
            f -= 0.5 * lambda / p.lambda_bounds.1;
        }
        Ok((f, pd, pp, feasible))
    }
}

fn verified_result(
    evaluator: &Evaluator,
    method: &str,
    channels: usize,
    lambda: f64,
    iterations: usize,
) -> Result<OptimizationResult> {
    let (pd, pp) = evaluator.evaluate_fresh(channels, lambda)?;
    let p = evaluator.problem;
    Ok(OptimizationResult {
        method: method.into(),
        feasible: pd <= p.eps_dropping && pp <= p.eps_preempt,
        channels,
        lambda_handoff: lambda,
        p_dropping: pd,
        p_preempt: pp,
        iterations,
        evaluations: evaluator.evaluations(),
    })
}

/// Exhaustive search: for each channel count (ascending) walk the rate grid
/// upward and record, per constraint, the last feasible grid point before its
/// first violation. The channel count is accepted when the two boundary rates
/// agree to within one grid step; the reported rate is the smaller boundary,
/// re-verified by a fresh solve. The preemption probability is unimodal in
/// the rate, so the prefix reading keeps the search on the rising branch.
pub fn direct_search(problem: &OptimizationProblem) -> Result<OptimizationResult> {
    problem.check()?;
    if !(problem.grid_step > 0.0) {
        return Err(Error::InvalidArgument("grid step must be positive".into()));
    }
    let evaluator = Evaluator::new(problem);
    let (s_min, s_max) = problem.s_bounds;
    let (lo, hi) = problem.lambda_bounds;
    let mut grid: Vec<f64> = Vec::new();
    let mut k = 1usize;
    loop {
        let v = k as f64 * problem.grid_step;
        if v > hi + 1e-12 {
            break;
        }
        if v >= lo - 1e-12 {
            grid.push(v.min(hi));
        }
        k += 1;
    }
    if grid.is_empty() {
        grid.push(hi);
    }
    let mut iterations = 0usize;
    for channels in s_min..=s_max {
        iterations += 1;
        let mut boundary_drop: Option<f64> = None;
        let mut boundary_preempt: Option<f64> = None;
        let mut drop_crossed = false;
        let mut preempt_crossed = false;
        for &lambda in &grid {
            let (pd, pp) = evaluator.evaluate(channels, lambda)?;
            if !drop_crossed {
                if pd <= problem.eps_dropping {
                    boundary_drop = Some(lambda);
                } else {
                    drop_crossed = true;
                }
            }
            if !preempt_crossed {
                if pp <= problem.eps_preempt {
                    boundary_preempt = Some(lambda);
                } else {
                    preempt_crossed = true;
                }
            }
            if drop_crossed && preempt_crossed {
                break;
            }
        }
        if let (Some(l1), Some(l2)) = (boundary_drop, boundary_preempt) {
            if (l1 - l2).abs() < problem.grid_step {
                let lambda = l1.min(l2);
                return verified_result(&evaluator, "direct-search", channels, lambda, iterations);
            }
        }
    }
    Ok(OptimizationResult {
        method: "direct-search".into(),
        feasible: false,
        channels: s_max,
        lambda_handoff: lo,
        p_dropping: f64::NAN,
        p_preempt: f64::NAN,
        iterations,
        evaluations: evaluator.evaluations(),
    })
}

/// Particle swarm hyperparameters; defaults follow the reference runs.
#[derive(Debug, Clone, Copy)]
pub struct PsoParams {
    pub swarm: usize,
    pub w_max: f64,
    pub w_min: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self {
            swarm: 60,
            w_max: 0.9,
            w_min: 0.4,
            c1: 2.0,
            c2: 2.0,
            max_iterations: 200,
            seed: 1,
        }
    }
}

/// Particle swarm over `(channels, rate)` with the channel coordinate carried
/// continuously and rounded up at evaluation; the static quadratic penalty
/// folds the constraints into the fitness. Inertia decays linearly. Fixed
/// seeds reproduce trajectories bit for bit.
pub fn pso(problem: &OptimizationProblem, params: &PsoParams) -> Result<OptimizationResult> {
    problem.check()?;
    if params.swarm < 2 || params.max_iterations < 1 {
        return Err(Error::InvalidArgument(
            "particle swarm needs at least 2 particles and 1 iteration".into(),
        ));
    }
    if !(params.w_min.is_finite() && params.w_max >= params.w_min) {
        return Err(Error::InvalidArgument("inertia window is empty".into()));
    }
    let evaluator = Evaluator::new(problem);
    let (s_min, s_max) = problem.s_bounds;
    let (l_min, l_max) = problem.lambda_bounds;
    let s_lo = s_min as f64;
    let s_hi = s_max as f64;
    let v_clamp = [(s_hi - s_lo) / 2.0, (l_max - l_min) / 2.0];
    let round_up = |s_cont: f64| -> usize { (s_cont.ceil() as usize).clamp(s_min, s_max) };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pos: Vec<[f64; 2]> = (0..params.swarm)
        .map(|_| {
            [
                s_lo + rng.gen::<f64>() * (s_hi - s_lo),
                l_min + rng.gen::<f64>() * (l_max - l_min),
            ]
        })
        .collect();
    let mut vel: Vec<[f64; 2]> = vec![[0.0, 0.0]; params.swarm];
    let mut fit: Vec<f64> = Vec::with_capacity(params.swarm);
    for p in &pos {
        fit.push(evaluator.fitness(round_up(p[0]), p[1])?.0);
    }
    let mut pbest = pos.clone();
    let mut pbest_fit = fit.clone();
    let mut gbest_idx = (0..params.swarm)
        .min_by(|&a, &b| pbest_fit[a].partial_cmp(&pbest_fit[b]).unwrap())
        .unwrap();
    let mut gbest = pbest[gbest_idx];
    let mut gbest_fit = pbest_fit[gbest_idx];

    for it in 0..params.max_iterations {
        let w = if params.max_iterations > 1 {
            params.w_max - (params.w_max - params.w_min) * it as f64 / (params.max_iterations - 1) as f64
        } else {
            params.w_max
        };
        for i in 0..params.swarm {
            for d in 0..2 {
                let u1: f64 = rng.gen();
                let u2: f64 = rng.gen();
                vel[i][d] = w * vel[i][d]
                    + params.c1 * u1 * (pbest[i][d] - pos[i][d])
                    + params.c2 * u2 * (gbest[d] - pos[i][d]);
                vel[i][d] = vel[i][d].clamp(-v_clamp[d], v_clamp[d]);
                pos[i][d] += vel[i][d];
            }
            pos[i][0] = pos[i][0].clamp(s_lo, s_hi);
            pos[i][1] = pos[i][1].clamp(l_min, l_max);
            let f = evaluator.fitness(round_up(pos[i][0]), pos[i][1])?.0;
            if f < pbest_fit[i] {
                pbest_fit[i] = f;
                pbest[i] = pos[i];
            }
            if f < gbest_fit {
                gbest_fit = f;
                gbest = pos[i];
                gbest_idx = i;
            }
        }
    }
    let _ = gbest_idx;
    let channels = round_up(gbest[0]);
    verified_result(&evaluator, "pso", channels, gbest[1], params.max_iterations)
}

/// Simulated annealing hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct SaParams {
    /// Points sampled to estimate the initial temperature as the mean
    /// absolute fitness.
    pub t0_samples: usize,
    /// Geometric cooling factor per epoch.
    pub cooling: f64,
    /// Proposals per temperature epoch.
    pub epoch: usize,
    /// Rate-step standard deviation as a fraction of the rate box width.
    pub step_scale: f64,
    /// Safety cap on epochs.
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SaParams {
    fn default() -> Self {
        Self {
            t0_samples: 20,
            cooling: 0.95,
            epoch: 50,
            step_scale: 0.1,
            max_epochs: 200,
            seed: 1,
        }
    }
}

/// Simulated annealing over `(channels, rate)`: the channel coordinate moves
/// by +-1, the rate by a Gaussian step; Metropolis acceptance with geometric
/// cooling, stopping once an entire epoch improves the incumbent by less than
/// 1e-6.
pub fn simulated_annealing(problem: &OptimizationProblem, params: &SaParams) -> Result<OptimizationResult> {
    problem.check()?;
    if !(params.cooling > 0.0 && params.cooling < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cooling rate {} must lie in (0, 1)",
            params.cooling
        )));
    }
    if params.epoch == 0 || params.max_epochs == 0 {
        return Err(Error::InvalidArgument("epoch sizes must be positive".into()));
    }
    let evaluator = Evaluator::new(problem);
    let (s_min, s_max) = problem.s_bounds;
    let (l_min, l_max) = problem.lambda_bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let sigma = params.step_scale * (l_max - l_min);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let random_point = |rng: &mut ChaCha8Rng| -> (usize, f64) {
        let s = rng.gen_range(s_min..=s_max);
        let l = l_min + rng.gen::<f64>() * (l_max - l_min);
        (s, l)
    };

    // Initial temperature: mean |F| over random points.
    let mut t = 0.0;
    for _ in 0..params.t0_samples.max(1) {
        let (s, l) = random_point(&mut rng);
        t += evaluator.fitness(s, l)?.0.abs();
    }
    t /= params.t0_samples.max(1) as f64;
    t = t.max(1e-6);

    let (mut s_cur, mut l_cur) = random_point(&mut rng);
    let mut f_cur = evaluator.fitness(s_cur, l_cur)?.0;
    let mut best = (s_cur, l_cur, f_cur);
    let mut iterations = 0usize;
    for _epoch in 0..params.max_epochs {
        let best_before = best.2;
        for _ in 0..params.epoch {
            iterations += 1;
            let s_prop = if rng.gen::<bool>() {
                (s_cur + 1).min(s_max)
            } else {
                s_cur.saturating_sub(1).max(s_min)
            };
            let l_prop = (l_cur + normal.sample(&mut rng)).clamp(l_min, l_max);
            let f_prop = evaluator.fitness(s_prop, l_prop)?.0;
            let delta = f_prop - f_cur;
            let accept = delta < 0.0 || rng.gen::<f64>() < (-delta / t).exp();
            if accept {
                s_cur = s_prop;
                l_cur = l_prop;
                f_cur = f_prop;
                if f_cur < best.2 {
                    best = (s_cur, l_cur, f_cur);
                }
            }
        }
        if (best_before - best.2).abs() < 1e-6 {
            break;
        }
        t *= params.cooling;
    }
    verified_result(&evaluator, "simulated-annealing", best.0, best.1, iterations)
}
