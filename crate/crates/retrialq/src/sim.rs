//! Next-event discrete-event simulation of the queue dynamics.
//!
//! This is the independent statistical oracle for the matrix-analytic path:
//! it shares no code with the generator assembly and drives the model purely
//! through competing exponential clocks — the arrival chain's current phase,
//! one clock per in-service call, and one clock per orbiting customer.
//!
//! Semantics mirrored from the chain:
//!
//! * a blocked new call joins the orbit in a fresh retrial phase;
//! * a handoff call arriving with every channel busy preempts a new call if
//!   one is in service (the victim joins the orbit in a fresh retrial phase
//!   and will later restart service from scratch), and is dropped otherwise;
//! * the preemption victim defaults to the most recently started new call,
//!   exactly the call the chain's preemption operator erases; a uniformly
//!   chosen victim is available as an option (service phases of concurrent
//!   new calls are not exchangeable — their ages differ — so the two rules
//!   are distinguishable in principle);
//! * a retry exit with an idle channel starts a new-call service; with all
//!   channels busy the customer re-enters the orbit in a fresh phase.
//!
//! Estimates use batch means over the post-warmup event stream. When a
//! truncation level is supplied, every functional is computed with the same
//! level cap the solver's reported measures use, so the two sides estimate
//! the identical quantity.

use crate::error::{Error, Result};
use crate::model::{retrial_mean_rate, ModelConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How the preemption victim is picked among in-service new calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VictimRule {
    /// The most recently started new call (matches the chain construction).
    #[default]
    Youngest,
    /// Uniformly random among in-service new calls.
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Total number of events to simulate (warmup included); at least 10^4.
    pub events: u64,
    pub seed: u64,
    /// Fraction of events discarded before statistics start.
    pub warmup_fraction: f64,
    pub batches: usize,
    /// Compute measure functionals capped at this truncation level so they
    /// match a solver report with the same `top`; `None` estimates the
    /// uncapped quantities (no blocking estimate in that case).
    pub level_cap: Option<usize>,
    pub victim: VictimRule,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            events: 1_000_000,
            seed: 1,
            warmup_fraction: 0.2,
            batches: 20,
            level_cap: None,
            victim: VictimRule::Youngest,
        }
    }
}

/// Point estimate with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Whole-run event counters; exact integers for balance checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub arrivals_new: u64,
    pub arrivals_handoff: u64,
    pub drops: u64,
    pub preemptions: u64,
    pub blocked_joins: u64,
    pub completions_new: u64,
    pub completions_handoff: u64,
    pub abandonments: u64,
    pub successful_retrials: u64,
    pub failed_retrials: u64,
}

/// Batch-means estimates of the thirteen measures plus run metadata.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub seed: u64,
    pub events: u64,
    pub batches: usize,
    pub level_cap: Option<usize>,
    pub sim_time: f64,
    pub counters: Counters,
    /// End-of-run snapshot for exact balance checks.
    pub final_new_in_service: usize,
    pub final_handoff_in_service: usize,
    pub final_orbit: u64,
    pub p_dropping: Estimate,
    /// Only estimable against a concrete truncation level.
    pub p_blocking: Option<Estimate>,
    pub p_preempt: Estimate,
    pub p_orbit_join: Estimate,
    pub p_leave_no_service: Estimate,
    pub e_handoff_in_service: Estimate,
    pub e_new_in_service: Estimate,
    pub e_orbit: Estimate,
    pub throughput: Estimate,
    pub retrial_success_rate: Estimate,
    pub p_handoff_in_service: Vec<Estimate>,
    pub p_new_in_service: Vec<Estimate>,
    /// Orbit-size occupancy fractions, indices `0..=level_cap` (or the
    /// deepest level observed when uncapped).
    pub p_orbit: Vec<Estimate>,
}

impl SimReport {
    /// Flat key/estimate view aligned with the solver report's keys.
    pub fn key_values(&self) -> Vec<(String, Estimate)> {
        let mut kv = Vec::new();
        kv.push(("p_dropping".to_string(), self.p_dropping));
        if let Some(pb) = self.p_blocking {
            kv.push(("p_blocking".into(), pb));
        }
        kv.push(("p_preempt".into(), self.p_preempt));
        kv.push(("p_orbit_join".into(), self.p_orbit_join));
        kv.push(("p_leave_no_service".into(), self.p_leave_no_service));
        kv.push(("e_handoff_in_service".into(), self.e_handoff_in_service));
        kv.push(("e_new_in_service".into(), self.e_new_in_service));
        kv.push(("e_orbit".into(), self.e_orbit));
        kv.push(("throughput".into(), self.throughput));
        kv.push(("retrial_success_rate".into(), self.retrial_success_rate));
        for (j, v) in self.p_handoff_in_service.iter().enumerate() {
            kv.push((format!("p_handoff_in_service_{j}"), *v));
        }
        for (j, v) in self.p_new_in_service.iter().enumerate() {
            kv.push((format!("p_new_in_service_{j}"), *v));
        }
        for (l, v) in self.p_orbit.iter().enumerate() {
            kv.push((format!("p_orbit_{l}"), *v));
        }
        kv
    }
}

#[derive(Default, Clone)]
struct Batch {
    time: f64,
    arrivals_new: u64,
    arrivals_handoff: u64,
    drops: u64,
    blocks_at_read_level: u64,
    preemptions: u64,
    orbit_joins: u64,
    completions: u64,
    successes: u64,
    abandonments: u64,
    time_handoff_count: Vec<f64>,
    time_new_count: Vec<f64>,
    time_orbit: Vec<f64>,
    orbit_time_weighted: f64,
}

impl Batch {
    fn new(channels: usize, orbit_levels: usize) -> Self {
        Self {
            time_handoff_count: vec![0.0; channels + 1],
            time_new_count: vec![0.0; channels + 1],
            time_orbit: vec![0.0; orbit_levels],
            ..Self::default()
        }
    }
}

struct SimState {
    clock: f64,
    arrival_phase: usize,
    /// In-service handoff call phases (order irrelevant).
    handoff_calls: Vec<usize>,
    /// In-service new call phases in service-start order, oldest first.
    new_calls: Vec<usize>,
    /// Orbiting customers per retrial phase.
    orbit: Vec<u64>,
    orbit_total: u64,
}

const ORBIT_EXPLOSION_GUARD: u64 = 1_000_000;

fn draw_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Runs the simulation and reports batch-means estimates of all measures.
pub fn simulate(cfg: &ModelConfig, opts: &SimOptions) -> Result<SimReport> {
    if opts.events < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "simulation horizon {} is below the 10^4-event minimum",
            opts.events
        )));
    }
    if !(0.0..0.9).contains(&opts.warmup_fraction) {
        return Err(Error::InvalidArgument(format!(
            "warmup fraction {} must lie in [0, 0.9)",
            opts.warmup_fraction
        )));
    }
    let warmup = (opts.events as f64 * opts.warmup_fraction) as u64;
    let measured = opts.events - warmup;
    if opts.batches < 2 || measured < opts.batches as u64 {
        return Err(Error::InvalidArgument(format!(
            "{} batches cannot be filled by {measured} measured events",
            opts.batches
        )));
    }
    let batch_size = measured / opts.batches as u64;

    let s = cfg.channels;
    let arr = &cfg.arrivals;
    let l = arr.phases();
    let theta = retrial_mean_rate(&cfg.retrial)?;
    // Orbit-level statistics: capped comparisons track `0..=top`, free runs
    // grow on demand.
    let tracked_levels = opts.level_cap.map(|m| m + 1).unwrap_or(64);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = SimState {
        clock: 0.0,
        arrival_phase: 0,
        handoff_calls: Vec::with_capacity(s),
        new_calls: Vec::with_capacity(s),
        orbit: vec![0; cfg.retrial.phases()],
        orbit_total: 0,
    };
    let mut counters = Counters::default();
    let mut batches: Vec<Batch> = (0..opts.batches)
        .map(|_| Batch::new(s, tracked_levels))
        .collect();

    for event_idx in 0..opts.events {
        let busy = state.handoff_calls.len() + state.new_calls.len();
        // Total exit rate of the current state.
        let mut total_rate = -arr.c0[(state.arrival_phase, state.arrival_phase)];
        for &p in &state.handoff_calls {
            total_rate += -cfg.service_handoff.transition[(p, p)];
        }
        for &p in &state.new_calls {
            total_rate += -cfg.service_new.transition[(p, p)];
        }
        for (r, &count) in state.orbit.iter().enumerate() {
            total_rate += count as f64 * -cfg.retrial.transition[(r, r)];
        }
        let dt = -rng.gen::<f64>().ln() / total_rate;

        // Time-weighted statistics use the pre-event state.
        let batch = if event_idx >= warmup {
            let b = ((event_idx - warmup) / batch_size).min(opts.batches as u64 - 1) as usize;
            Some(b)
        } else {
            None
        };
        let within_cap = |orbit_total: u64, cap: Option<usize>| match cap {
            Some(m) => orbit_total < m as u64, // levels 0..=m-1
            None => true,
        };
        if let Some(b) = batch {
            let acc = &mut batches[b];
            acc.time += dt;
            let capped = within_cap(state.orbit_total, opts.level_cap);
            if busy >= 1 && capped {
                acc.time_handoff_count[state.handoff_calls.len()] += dt;
                acc.time_new_count[state.new_calls.len()] += dt;
            }
            let lvl = state.orbit_total as usize;
            if lvl < acc.time_orbit.len() {
                acc.time_orbit[lvl] += dt;
            } else if opts.level_cap.is_none() {
                acc.time_orbit.resize(lvl + 1, 0.0);
                acc.time_orbit[lvl] += dt;
            }
            if capped {
                acc.orbit_time_weighted += state.orbit_total as f64 * dt;
            }
        }
        state.clock += dt;

        // Pick and apply one transition.
        let mut u = rng.gen::<f64>() * total_rate;
        let mut chosen: Option<EventKind> = None;
        'outer: {
            // Arrival-chain event.
            let v = state.arrival_phase;
            for w in 0..l {
                if w != v {
                    u -= arr.c0[(v, w)];
                    if u < 0.0 {
                        chosen = Some(EventKind::PhaseMove(w));
                        break 'outer;
                    }
                }
            }
            for w in 0..l {
                u -= arr.c_new[(v, w)];
                if u < 0.0 {
                    chosen = Some(EventKind::ArrivalNew(w));
                    break 'outer;
                }
            }
            for w in 0..l {
                u -= arr.c_handoff[(v, w)];
                if u < 0.0 {
                    chosen = Some(EventKind::ArrivalHandoff(w));
                    break 'outer;
                }
            }
            for i in 0..state.handoff_calls.len() {
                let p = state.handoff_calls[i];
                u -= -cfg.service_handoff.transition[(p, p)];
                if u < 0.0 {
                    chosen = Some(EventKind::HandoffService(i));
                    break 'outer;
                }
            }
            for i in 0..state.new_calls.len() {
                let p = state.new_calls[i];
                u -= -cfg.service_new.transition[(p, p)];
                if u < 0.0 {
                    chosen = Some(EventKind::NewService(i));
                    break 'outer;
                }
            }
            for r in 0..state.orbit.len() {
                u -= state.orbit[r] as f64 * -cfg.retrial.transition[(r, r)];
                if u < 0.0 {
                    chosen = Some(EventKind::OrbitEvent(r));
                    break 'outer;
                }
            }
            // Rounding pushed us past the end; retry with the last category.
            chosen = Some(EventKind::PhaseMove(v));
        }

        let pre_orbit = state.orbit_total;
        let capped_now = within_cap(pre_orbit, opts.level_cap);
        match chosen.expect("an event was chosen") {
            EventKind::PhaseMove(w) => state.arrival_phase = w,
            EventKind::ArrivalNew(w) => {
                state.arrival_phase = w;
                counters.arrivals_new += 1;
                if let Some(b) = batch {
                    batches[b].arrivals_new += 1;
                }
                if busy < s {
                    state
                        .new_calls
                        .push(draw_categorical(&mut rng, &cfg.service_new.beta));
                } else {
                    counters.blocked_joins += 1;
                    let fresh = draw_categorical(&mut rng, &cfg.retrial.gamma);
                    state.orbit[fresh] += 1;
                    state.orbit_total += 1;
                    if let Some(b) = batch {
                        if capped_now {
                            batches[b].orbit_joins += 1;
                        }
                        if let Some(m) = opts.level_cap {
                            if m >= 1 && pre_orbit == m as u64 - 1 {
                                batches[b].blocks_at_read_level += 1;
                            }
                        }
                    }
                }
            }
            EventKind::ArrivalHandoff(w) => {
                state.arrival_phase = w;
                counters.arrivals_handoff += 1;
                if let Some(b) = batch {
                    batches[b].arrivals_handoff += 1;
                }
                if busy < s {
                    state
                        .handoff_calls
                        .push(draw_categorical(&mut rng, &cfg.service_handoff.beta));
                } else if !state.new_calls.is_empty() {
                    counters.preemptions += 1;
                    if let Some(b) = batch {
                        if capped_now {
                            batches[b].preemptions += 1;
                        }
                    }
                    let victim = match opts.victim {
                        VictimRule::Youngest => state.new_calls.len() - 1,
                        VictimRule::Uniform => rng.gen_range(0..state.new_calls.len()),
                    };
                    state.new_calls.remove(victim);
                    state
                        .handoff_calls
                        .push(draw_categorical(&mut rng, &cfg.service_handoff.beta));
                    let fresh = draw_categorical(&mut rng, &cfg.retrial.gamma);
                    state.orbit[fresh] += 1;
                    state.orbit_total += 1;
                } else {
                    counters.drops += 1;
                    if let Some(b) = batch {
                        if capped_now {
                            batches[b].drops += 1;
                        }
                    }
                }
            }
            EventKind::HandoffService(i) => {
                let p = state.handoff_calls[i];
                let mut weights: Vec<f64> = (0..cfg.service_handoff.phases())
                    .map(|q| if q == p { 0.0 } else { cfg.service_handoff.transition[(p, q)] })
                    .collect();
                weights.push(cfg.service_handoff.exit[p]);
                let pick = draw_categorical(&mut rng, &weights);
                if pick == weights.len() - 1 {
                    state.handoff_calls.swap_remove(i);
                    counters.completions_handoff += 1;
                    if let Some(b) = batch {
                        if capped_now {
                            batches[b].completions += 1;
                        }
                    }
                } else {
                    state.handoff_calls[i] = pick;
                }
            }
            EventKind::NewService(i) => {
                let p = state.new_calls[i];
                let mut weights: Vec<f64> = (0..cfg.service_new.phases())
                    .map(|q| if q == p { 0.0 } else { cfg.service_new.transition[(p, q)] })
                    .collect();
                weights.push(cfg.service_new.exit[p]);
                let pick = draw_categorical(&mut rng, &weights);
                if pick == weights.len() - 1 {
                    // Preserve start order for the remaining calls.
                    state.new_calls.remove(i);
                    counters.completions_new += 1;
                    if let Some(b) = batch {
                        if capped_now {
                            batches[b].completions += 1;
                        }
                    }
                } else {
                    state.new_calls[i] = pick;
                }
            }
            EventKind::OrbitEvent(r) => {
                let n_phases = cfg.retrial.phases();
                let mut weights: Vec<f64> = (0..n_phases)
                    .map(|q| if q == r { 0.0 } else { cfg.retrial.transition[(r, q)] })
                    .collect();
                weights.push(cfg.retrial.exit_leave[r]);
                weights.push(cfg.retrial.exit_retry[r]);
                let pick = draw_categorical(&mut rng, &weights);
                if pick < n_phases {
                    state.orbit[r] -= 1;
                    state.orbit[pick] += 1;
                } else if pick == n_phases {
                    state.orbit[r] -= 1;
                    state.orbit_total -= 1;
                    counters.abandonments += 1;
                    if let Some(b) = batch {
                        // The abandonment measure sums levels 1..=top-1.
                        if capped_now {
                            batches[b].abandonments += 1;
                        }
                    }
                } else if busy < s {
                    state.orbit[r] -= 1;
                    state.orbit_total -= 1;
                    state
                        .new_calls
                        .push(draw_categorical(&mut rng, &cfg.service_new.beta));
                    counters.successful_retrials += 1;
                    if let Some(b) = batch {
                        if capped_now {
                            batches[b].successes += 1;
                        }
                    }
                } else {
                    counters.failed_retrials += 1;
                    state.orbit[r] -= 1;
                    let fresh = draw_categorical(&mut rng, &cfg.retrial.gamma);
                    state.orbit[fresh] += 1;
                }
            }
        }
        if state.orbit_total > ORBIT_EXPLOSION_GUARD {
            return Err(Error::InvalidArgument(format!(
                "orbit size exceeded {ORBIT_EXPLOSION_GUARD}; event rates are exploding"
            )));
        }
    }

    // Collapse batches into estimates.
    let est_ratio = |num: &dyn Fn(&Batch) -> f64, den: &dyn Fn(&Batch) -> f64| -> Estimate {
        let values: Vec<f64> = batches
            .iter()
            .map(|b| {
                let d = den(b);
                if d > 0.0 {
                    num(b) / d
                } else {
                    0.0
                }
            })
            .collect();
        mean_se(&values)
    };
    let channels = s;
    let p_h: Vec<Estimate> = (0..=channels)
        .map(|j| est_ratio(&move |b: &Batch| b.time_handoff_count[j], &|b| b.time))
        .collect();
    let p_n: Vec<Estimate> = (0..=channels)
        .map(|j| est_ratio(&move |b: &Batch| b.time_new_count[j], &|b| b.time))
        .collect();
    let orbit_levels = batches.iter().map(|b| b.time_orbit.len()).max().unwrap_or(0);
    let p_orbit: Vec<Estimate> = (0..orbit_levels)
        .map(|lvl| {
            est_ratio(
                &move |b: &Batch| b.time_orbit.get(lvl).copied().unwrap_or(0.0),
                &|b| b.time,
            )
        })
        .collect();
    let e_h = {
        let values: Vec<f64> = batches
            .iter()
            .map(|b| {
                if b.time > 0.0 {
                    (1..=channels).map(|j| j as f64 * b.time_handoff_count[j]).sum::<f64>() / b.time
                } else {
                    0.0
                }
            })
            .collect();
        mean_se(&values)
    };
    let e_n = {
        let values: Vec<f64> = batches
            .iter()
            .map(|b| {
                if b.time > 0.0 {
                    (1..=channels).map(|j| j as f64 * b.time_new_count[j]).sum::<f64>() / b.time
                } else {
                    0.0
                }
            })
            .collect();
        mean_se(&values)
    };
    let report = SimReport {
        seed: opts.seed,
        events: opts.events,
        batches: opts.batches,
        level_cap: opts.level_cap,
        sim_time: state.clock,
        counters,
        final_new_in_service: state.new_calls.len(),
        final_handoff_in_service: state.handoff_calls.len(),
        final_orbit: state.orbit_total,
        p_dropping: est_ratio(&|b| b.drops as f64, &|b| b.arrivals_handoff as f64),
        p_blocking: opts
            .level_cap
            .map(|_| est_ratio(&|b| b.blocks_at_read_level as f64, &|b| b.arrivals_new as f64)),
        p_preempt: est_ratio(&|b| b.preemptions as f64, &|b| b.arrivals_handoff as f64),
        p_orbit_join: est_ratio(&|b| b.orbit_joins as f64, &|b| b.arrivals_new as f64),
        p_leave_no_service: {
            let mut e = est_ratio(&|b| b.abandonments as f64, &|b| b.time);
            e.value /= theta;
            e.stderr /= theta;
            e
        },
        e_handoff_in_service: e_h,
        e_new_in_service: e_n,
        e_orbit: est_ratio(&|b| b.orbit_time_weighted, &|b| b.time),
        throughput: est_ratio(&|b| b.completions as f64, &|b| b.time),
        retrial_success_rate: est_ratio(&|b| b.successes as f64, &|b| b.time),
        p_handoff_in_service: p_h,
        p_new_in_service: p_n,
        p_orbit,
    };
    Ok(report)
}

enum EventKind {
    PhaseMove(usize),
    ArrivalNew(usize),
    ArrivalHandoff(usize),
    HandoffService(usize),
    NewService(usize),
    OrbitEvent(usize),
}

fn mean_se(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Estimate {
        value: mean,
        stderr: (var / n).sqrt(),
    }
}

/// Runs the simulation across a parameter grid with a shared seed (common
/// random numbers across grid points). `axis` is a dotted override key, e.g.
/// `mmap.lambda_h` or `retrial.theta`.
pub fn trend_sweep(
    cfg: &ModelConfig,
    axis: &str,
    grid: &[f64],
    opts: &SimOptions,
) -> Result<Vec<(f64, SimReport)>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut point_cfg = cfg.clone();
        crate::config::apply_override(&mut point_cfg, axis, &value.to_string())?;
        out.push((value, simulate(&point_cfg, opts)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;
    use crate::measures;
    use crate::model::{MarkedMap, ModelConfig, PhaseType, RetrialPh, TruncationPolicy};
    use crate::solver;
    use crate::state::Mode;

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
            truncation: TruncationPolicy::Fixed(4),
            row_sum_tol: 1e-9,
        }
    }

    #[test]
    fn fixed_seed_reproduces_counters_bit_for_bit() {
        let cfg = config::preset("section5").unwrap();
        let opts = SimOptions {
            events: 50_000,
            seed: 42,
            ..Default::default()
        };
        let a = simulate(&cfg, &opts).unwrap();
        let b = simulate(&cfg, &opts).unwrap();
        assert_eq!(a.counters, b.counters);
        assert_eq!(a.sim_time.to_bits(), b.sim_time.to_bits());
        let c = simulate(
            &cfg,
            &SimOptions {
                seed: 43,
                ..opts
            },
        )
        .unwrap();
        assert_ne!(a.counters, c.counters);
    }

    #[test]
    fn new_call_count_identity_is_exact() {
        let cfg = config::preset("section5").unwrap();
        let opts = SimOptions {
            events: 120_000,
            seed: 7,
            ..Default::default()
        };
        let r = simulate(&cfg, &opts).unwrap();
        let c = &r.counters;
        // Every new arrival is completed, abandoned, still in service, or
        // still in orbit; successful retrials and preemptions only move
        // customers between those pools.
        assert_eq!(
            c.arrivals_new,
            c.completions_new + c.abandonments + r.final_new_in_service as u64 + r.final_orbit
        );
        // Orbit in/out balance.
        assert_eq!(
            c.blocked_joins + c.preemptions,
            c.abandonments + c.successful_retrials + r.final_orbit
        );
        // Handoff accounting: arrivals either start service (completing or
        // still being served) or are dropped; preemption admits the call.
        assert_eq!(
            c.arrivals_handoff,
            c.completions_handoff + c.drops + r.final_handoff_in_service as u64
        );
        assert!(c.preemptions <= c.arrivals_handoff);
    }

    #[test]
    fn no_abandonment_exit_means_zero_abandon_counter() {
        let cfg = scalar_config(0.6, 0.8, 1.0, 1.5, 0.0, 0.7, 1);
        let r = simulate(
            &cfg,
            &SimOptions {
                events: 60_000,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.counters.abandonments, 0);
        assert_eq!(r.p_leave_no_service.value, 0.0);
    }

    #[test]
    fn pure_handoff_loss_matches_closed_form() {
        let (lh, mu) = (0.9, 1.4);
        let cfg = scalar_config(0.0, lh, 1.0, mu, 0.3, 0.7, 1);
        let r = simulate(
            &cfg,
            &SimOptions {
                events: 400_000,
                seed: 11,
                ..Default::default()
            },
        )
        .unwrap();
        let rho = lh / mu;
        let want = rho / (1.0 + rho);
        let diff = (r.p_dropping.value - want).abs();
        assert!(
            diff <= 3.0 * r.p_dropping.stderr,
            "drop {} vs closed form {want}, 3se {}",
            r.p_dropping.value,
            3.0 * r.p_dropping.stderr
        );
    }

    #[test]
    fn solver_and_simulator_agree_on_a_desk_config() {
        let cfg = scalar_config(0.6, 0.8, 1.0, 1.5, 0.3, 0.7, 2);
        let ss = solver::solve_truncated(&cfg, Mode::Lumped, 8, crate::kron::DEFAULT_ENTRY_CAP).unwrap();
        let want = measures::evaluate(&ss, &cfg).unwrap();
        let r = simulate(
            &cfg,
            &SimOptions {
                events: 300_000,
                seed: 5,
                level_cap: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        let solver_kv: std::collections::BTreeMap<String, f64> = want.key_values().into_iter().collect();
        for (key, est) in r.key_values() {
            let Some(&target) = solver_kv.get(&key) else {
                continue;
            };
            let slack = 3.0 * est.stderr + 1e-9;
            assert!(
                (est.value - target).abs() <= slack,
                "{key}: sim {} vs solver {target}, slack {slack}",
                est.value
            );
        }
    }

    #[test]
    fn horizon_validation() {
        let cfg = config::preset("section5").unwrap();
        assert!(simulate(
            &cfg,
            &SimOptions {
                events: 100,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn victim_rules_both_run_deterministically() {
        let cfg = config::preset("section5").unwrap();
        for victim in [VictimRule::Youngest, VictimRule::Uniform] {
            let opts = SimOptions {
                events: 50_000,
                seed: 9,
                victim,
                ..Default::default()
            };
            let a = simulate(&cfg, &opts).unwrap();
            let b = simulate(&cfg, &opts).unwrap();
            assert_eq!(a.counters, b.counters);
        }
    }
}
