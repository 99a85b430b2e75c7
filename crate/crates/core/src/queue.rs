//! Single-server FIFO queue with Poisson arrivals of time-varying rate and
//! i.i.d. general service.
//!
//! Three complementary views of the same process:
//! * event-driven sample paths ([`simulate_path`]), with thinning for the
//!   nonhomogeneous arrivals and exact departure bookkeeping,
//! * the exact piecewise-linear unfinished-work function ([`workload`]),
//! * a deterministic master-equation integrator ([`evolve_master`]) over
//!   states (queue length, elapsed service), kept in flux form so mass is
//!   conserved by construction.
//!
//! On top of those sit stationary states under constant rate
//! ([`stationary_state`]), scalar observables ([`observables`]), and the
//! suffix-mass ordering of rate functions with its constructive coupling
//! ([`order_and_couple`]).

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::dist::ServiceDistribution;
use crate::error::PhLabError;

/// Default master-equation step and elapsed-service bin width.
pub const MASTER_STEP: f64 = 0.01;
/// Default queue-length truncation of the master-equation grid.
pub const DEFAULT_N_MAX: usize = 200;
/// Allowed mass drift within one master-equation step.
pub const MASS_STEP_TOL: f64 = 1e-9;
/// Allowed cumulative mass drift per unit time.
pub const MASS_DRIFT_TOL: f64 = 1e-6;
/// Total-variation gap between successive snapshots that counts as
/// stationary.
pub const STATIONARY_TV_TOL: f64 = 1e-8;
/// Queue-length rows whose total mass falls below this are dropped into
/// the truncation account instead of being stepped forever.
const ROW_SHED_FLOOR: f64 = 1e-20;

/// Instantaneous server state: empty, or `n` customers in system with the
/// one in service having run for `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerConfiguration {
    Idle,
    Busy { n: usize, tau: f64 },
}

impl ServerConfiguration {
    pub fn busy(n: usize, tau: f64) -> Result<Self, PhLabError> {
        if n == 0 || !(tau >= 0.0) || !tau.is_finite() {
            return Err(PhLabError::InvalidInput(format!(
                "busy configuration needs n >= 1 and tau >= 0, got ({n}, {tau})"
            )));
        }
        Ok(Self::Busy { n, tau })
    }

    pub fn is_idle(&self) -> bool {
        matches!(self, Self::Idle)
    }

    /// The strong pointwise order between explicit configurations: at least
    /// as many customers with the same elapsed service, or the other side
    /// empty.
    pub fn taller_than(&self, other: &Self) -> bool {
        match (self, other) {
            (_, Self::Idle) => true,
            (Self::Idle, Self::Busy { .. }) => false,
            (Self::Busy { n: n1, tau: t1 }, Self::Busy { n: n2, tau: t2 }) => {
                n1 >= n2 && t1 == t2
            }
        }
    }
}

/// Piecewise-constant nonnegative rate, zero for `t < 0`, holding its last
/// value beyond the table.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFunction {
    step: f64,
    values: Vec<f64>,
    cap: f64,
}

impl RateFunction {
    pub fn constant(rate: f64) -> Self {
        Self::from_values(MASTER_STEP, vec![rate], None).expect("constant rate is valid")
    }

    /// Values on `[0, h), [h, 2h), ...`. The cap defaults to the largest
    /// value; a declared cap smaller than some value is a contract error.
    pub fn from_values(step: f64, values: Vec<f64>, cap: Option<f64>) -> Result<Self, PhLabError> {
        if !(step > 0.0) || values.is_empty() {
            return Err(PhLabError::InvalidInput(
                "rate function needs a positive step and at least one value".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PhLabError::InvalidInput("rates must be finite and >= 0".into()));
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        let cap = cap.unwrap_or(max);
        if max > cap {
            return Err(PhLabError::InvalidInput(format!(
                "rate {max} exceeds its declared cap {cap}"
            )));
        }
        Ok(Self { step, values, cap })
    }

    /// Samples `f` at bin midpoints over `[0, t_max)`.
    pub fn from_fn(step: f64, t_max: f64, f: impl Fn(f64) -> f64) -> Result<Self, PhLabError> {
        if !(t_max > 0.0) {
            return Err(PhLabError::InvalidInput("rate table needs t_max > 0".into()));
        }
        let bins = (t_max / step).ceil() as usize;
        let values: Vec<f64> = (0..bins.max(1)).map(|i| f((i as f64 + 0.5) * step)).collect();
        Self::from_values(step, values, None)
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let i = (t / self.step).floor() as usize;
        self.values[i.min(self.values.len() - 1)]
    }

    /// Exact integral of the piecewise-constant rate over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let a = a.max(0.0);
        if b <= a {
            return 0.0;
        }
        let h = self.step;
        let last = self.values.len() - 1;
        let mut total = 0.0;
        let mut t = a;
        while t < b {
            let mut i = (t / h).floor() as usize;
            let mut bin_end = (i + 1) as f64 * h;
            // Guard against a floor landing one bin early at boundaries.
            if bin_end <= t {
                i += 1;
                bin_end += h;
            }
            if i >= last {
                total += self.values[last] * (b - t);
                break;
            }
            let seg_end = bin_end.min(b);
            total += self.values[i] * (seg_end - t);
            t = seg_end;
        }
        total
    }
}

/// Grid geometry for the master equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Time step and elapsed-service bin width.
    pub h: f64,
    /// Queue-length truncation.
    pub n_max: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { h: MASTER_STEP, n_max: DEFAULT_N_MAX }
    }
}

impl GridSpec {
    pub fn bins_for(&self, d: &ServiceDistribution) -> usize {
        ((d.tail_cut() / self.h).ceil() as usize).max(1)
    }

    /// Point mass on the empty configuration.
    pub fn idle_state(&self, d: &ServiceDistribution) -> StateDistribution {
        StateDistribution::idle_point(self.h, self.n_max, self.bins_for(d))
    }

    /// Point mass on `(n, tau)`.
    pub fn busy_state(
        &self,
        d: &ServiceDistribution,
        n: usize,
        tau: f64,
    ) -> Result<StateDistribution, PhLabError> {
        StateDistribution::busy_point(n, tau, self.h, self.n_max, self.bins_for(d))
    }
}

/// Probability masses over the empty configuration and the
/// (queue length, elapsed-service bin) grid.
#[derive(Debug, Clone)]
pub struct StateDistribution {
    h: f64,
    n_max: usize,
    bins: usize,
    idle_mass: f64,
    /// Flat row-major masses: `(n - 1) * bins + k`.
    grid: Vec<f64>,
    truncation_tail: f64,
}

impl StateDistribution {
    pub fn idle_point(h: f64, n_max: usize, bins: usize) -> Self {
        Self { h, n_max, bins, idle_mass: 1.0, grid: vec![0.0; n_max * bins], truncation_tail: 0.0 }
    }

    pub fn busy_point(
        n: usize,
        tau: f64,
        h: f64,
        n_max: usize,
        bins: usize,
    ) -> Result<Self, PhLabError> {
        if n == 0 || n > n_max {
            return Err(PhLabError::InvalidInput(format!(
                "queue length {n} outside the grid range 1..={n_max}"
            )));
        }
        let k = (tau / h).floor() as usize;
        if !(tau >= 0.0) || k >= bins {
            return Err(PhLabError::InvalidInput(format!(
                "elapsed service {tau} outside the grid range [0, {})",
                bins as f64 * h
            )));
        }
        let mut s = Self::idle_point(h, n_max, bins);
        s.idle_mass = 0.0;
        s.grid[(n - 1) * bins + k] = 1.0;
        Ok(s)
    }

    /// Builds a state from explicit cell masses, row-major as
    /// `(n - 1) * bins + k`. The masses must form a probability
    /// distribution; anything above `n_max` goes in the truncation tail.
    pub fn from_masses(
        h: f64,
        n_max: usize,
        bins: usize,
        idle_mass: f64,
        grid: Vec<f64>,
        truncation_tail: f64,
    ) -> Result<Self, PhLabError> {
        if !(h > 0.0) || n_max == 0 || bins == 0 {
            return Err(PhLabError::InvalidInput(format!(
                "degenerate grid geometry h={h}, n_max={n_max}, bins={bins}"
            )));
        }
        if grid.len() != n_max * bins {
            return Err(PhLabError::InvalidInput(format!(
                "grid vector has {} cells, geometry wants {}",
                grid.len(),
                n_max * bins
            )));
        }
        let s = Self { h, n_max, bins, idle_mass, grid, truncation_tail };
        s.validate()?;
        Ok(s)
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn idle_mass(&self) -> f64 {
        self.idle_mass
    }

    /// Mass of queue length `n` (1-based) in elapsed-service bin `k`.
    pub fn mass(&self, n: usize, k: usize) -> f64 {
        self.grid[(n - 1) * self.bins + k]
    }

    /// Mass lost to grid truncation so far (forced completions at the
    /// elapsed-service edge, arrivals beyond the queue-length cap).
    pub fn truncation_tail(&self) -> f64 {
        self.truncation_tail
    }

    pub fn total_mass(&self) -> f64 {
        self.idle_mass + self.grid.iter().sum::<f64>()
    }

    /// Marginal probability of queue length `n`.
    pub fn queue_length_mass(&self, n: usize) -> f64 {
        self.grid[(n - 1) * self.bins..n * self.bins].iter().sum()
    }

    pub fn validate(&self) -> Result<(), PhLabError> {
        if self.grid.iter().any(|m| *m < 0.0) || self.idle_mass < 0.0 {
            return Err(PhLabError::InvalidInput("state has negative mass".into()));
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PhLabError::InvalidInput(format!(
                "state mass {total} deviates from 1 by more than 1e-9"
            )));
        }
        if self.truncation_tail > 1e-6 {
            return Err(PhLabError::InvalidInput(format!(
                "truncation tail {} exceeds 1e-6",
                self.truncation_tail
            )));
        }
        Ok(())
    }

    fn same_geometry(&self, other: &Self) -> bool {
        self.h == other.h && self.n_max == other.n_max && self.bins == other.bins
    }

    /// Total-variation distance; both states must share a grid.
    pub fn total_variation(&self, other: &Self) -> Result<f64, PhLabError> {
        if !self.same_geometry(other) {
            return Err(PhLabError::InvalidInput(
                "total variation requires identical grid geometry".into(),
            ));
        }
        let mut acc = (self.idle_mass - other.idle_mass).abs();
        for (a, b) in self.grid.iter().zip(&other.grid) {
            acc += (a - b).abs();
        }
        Ok(0.5 * acc)
    }
}

/// Draws configurations from a state distribution by inverting the
/// cumulative mass over the nonzero cells. Elapsed service is reported at
/// the left edge of its bin, the same convention the grid itself uses.
#[derive(Debug, Clone)]
pub struct ConfigurationSampler {
    h: f64,
    bins: usize,
    idle_mass: f64,
    /// `(flat cell index, cumulative mass including this cell)`.
    cum: Vec<(usize, f64)>,
    total: f64,
}

impl StateDistribution {
    /// Prepares an inverse-cdf sampler; the state must be a valid
    /// probability distribution.
    pub fn sampler(&self) -> Result<ConfigurationSampler, PhLabError> {
        self.validate()?;
        let mut cum = Vec::new();
        let mut acc = self.idle_mass;
        for (cell, &m) in self.grid.iter().enumerate() {
            if m > 0.0 {
                acc += m;
                cum.push((cell, acc));
            }
        }
        Ok(ConfigurationSampler {
            h: self.h,
            bins: self.bins,
            idle_mass: self.idle_mass,
            cum,
            total: acc,
        })
    }
}

impl ConfigurationSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> ServerConfiguration {
        let u = rng.gen::<f64>() * self.total;
        if u < self.idle_mass {
            return ServerConfiguration::Idle;
        }
        let at = self.cum.partition_point(|&(_, c)| c <= u);
        let (cell, _) = self.cum[at.min(self.cum.len() - 1)];
        ServerConfiguration::Busy { n: cell / self.bins + 1, tau: (cell % self.bins) as f64 * self.h }
    }
}

/// Scalar summaries of a state: mean queue length, expected unfinished
/// sojourn work (waiting customers plus the residual of the one in
/// service), and idle probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observables {
    pub n_mean: f64,
    pub s_mean: f64,
    pub idle: f64,
}

/// Computes the observables of `mu`, reading the residual service mean at
/// each bin's left edge.
pub fn observables(
    mu: &StateDistribution,
    d: &ServiceDistribution,
) -> Result<Observables, PhLabError> {
    let mut residual = Vec::with_capacity(mu.bins);
    for k in 0..mu.bins {
        residual.push(d.residual_mean(k as f64 * mu.h)?);
    }
    let mut n_mean = 0.0;
    let mut s_mean = 0.0;
    for n in 1..=mu.n_max {
        let row = &mu.grid[(n - 1) * mu.bins..n * mu.bins];
        for (k, m) in row.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            n_mean += n as f64 * m;
            s_mean += ((n - 1) as f64 + residual[k]) * m;
        }
    }
    Ok(Observables { n_mean, s_mean, idle: mu.idle_mass })
}

/// Deterministic trajectory of the master equation: per-step output rate
/// and cheap scalars, plus the exact final state.
#[derive(Debug, Clone)]
pub struct MasterTrajectory {
    /// Step end times.
    pub times: Vec<f64>,
    /// Mean departure rate over each step.
    pub b: Vec<f64>,
    /// Idle mass at each step end.
    pub idle: Vec<f64>,
    /// Mean queue length mid-step.
    pub n_mean: Vec<f64>,
    pub final_state: StateDistribution,
}

impl MasterTrajectory {
    /// The departure intensity as a rate function on the same grid.
    pub fn output_rate(&self) -> Result<RateFunction, PhLabError> {
        let h = if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            self.times.first().copied().unwrap_or(MASTER_STEP)
        };
        RateFunction::from_values(h, self.b.clone(), None)
    }

    /// Exact integral of the output rate over the full horizon.
    pub fn departures_total(&self) -> f64 {
        let h = if self.times.len() > 1 { self.times[1] - self.times[0] } else { 0.0 };
        self.b.iter().sum::<f64>() * h
    }
}

/// Integrates the forward equations on the (queue length, elapsed-service
/// bin) grid. Each step splits into a half arrival, an exact per-bin
/// service flux with deterministic bin advance, and a second half arrival.
/// The flux fraction of bin `k` is the completion probability within the
/// bin given survival to its left edge, so mass moves but is never created
/// or destroyed; conservation is checked, not enforced.
pub fn evolve_master(
    mu0: &StateDistribution,
    lam: &RateFunction,
    d: &ServiceDistribution,
    horizon: f64,
) -> Result<MasterTrajectory, PhLabError> {
    if !(horizon > 0.0) {
        return Err(PhLabError::InvalidInput("horizon must be positive".into()));
    }
    mu0.validate()?;
    let h = mu0.h;
    let bins = mu0.bins;
    let n_max = mu0.n_max;
    let steps = ((horizon / h).round() as usize).max(1);

    // Per-bin completion probabilities. The last bin holds its unfinished
    // mass in place with the hazard frozen at the grid edge, so the far
    // tail (survival below the distribution's cutoff) ages without being
    // discarded; forcing completion there instead would leak mass into the
    // truncation account at a steady rate and break long runs.
    let mut q = Vec::with_capacity(bins);
    for k in 0..bins {
        let lo = k as f64 * h;
        let hi = lo + h;
        let surv = 1.0 - d.cdf(lo);
        let frac = if surv <= 0.0 { 1.0 } else { ((d.cdf(hi) - d.cdf(lo)) / surv).clamp(0.0, 1.0) };
        q.push(frac);
    }
    // Chance that the customer promoted by a mid-step completion itself
    // completes before the step ends (about half a step of fresh service).
    // Without this second-order cascade the scheme caps departures at one
    // per step, a relative service deficit of h/2 that biases stationary
    // states by O(h).
    let cascade = d.cdf(0.5 * h);

    let mut cur = mu0.grid.clone();
    let mut nxt = vec![0.0; cur.len()];
    let mut idle = mu0.idle_mass;
    let mut trunc = mu0.truncation_tail;
    let mut n_hi = (1..=n_max)
        .rev()
        .find(|&n| cur[(n - 1) * bins..n * bins].iter().any(|m| *m > 0.0))
        .unwrap_or(1);
    let mut k_hi = (0..bins)
        .rev()
        .find(|&k| (1..=n_max).any(|n| cur[(n - 1) * bins + k] > 0.0))
        .unwrap_or(0);

    let mut traj = MasterTrajectory {
        times: Vec::with_capacity(steps),
        b: Vec::with_capacity(steps),
        idle: Vec::with_capacity(steps),
        n_mean: Vec::with_capacity(steps),
        final_state: mu0.clone(),
    };
    let mut prev_total = idle + cur.iter().sum::<f64>();
    let start_total = prev_total;

    for step in 0..steps {
        let t = step as f64 * h;
        let rate = lam.eval(t + 0.5 * h);
        let a = rate * h * 0.5;
        if a >= 1.0 {
            return Err(PhLabError::StepSize(format!(
                "arrival probability {a} per half step at t = {t}; decrease the step"
            )));
        }

        half_arrival(&mut cur, &mut idle, a, &mut n_hi, k_hi, bins, n_max, &mut trunc);

        // Service flux into the fresh buffer, fused with the mass audit.
        let span = k_hi + 1;
        for n in 0..=n_hi.min(n_max - 1) {
            let row = n * bins;
            nxt[row..row + (span + 1).min(bins)].fill(0.0);
        }
        let mut flux_total = 0.0;
        let mut grid_sum = 0.0;
        let mut n_sum = 0.0;
        let mut idle_gain = 0.0;
        for n in 1..=n_hi {
            let row = (n - 1) * bins;
            for k in 0..span {
                let m = cur[row + k];
                if m == 0.0 {
                    continue;
                }
                grid_sum += m;
                n_sum += n as f64 * m;
                let f = q[k] * m;
                flux_total += f;
                if n == 1 {
                    idle_gain += f;
                } else {
                    let f2 = f * cascade;
                    flux_total += f2;
                    if n == 2 {
                        idle_gain += f2;
                    } else {
                        nxt[row - 2 * bins] += f2;
                    }
                    nxt[row - bins] += f - f2;
                }
                let rest = m - f;
                if rest > 0.0 {
                    if k + 1 < bins {
                        nxt[row + k + 1] += rest;
                    } else {
                        nxt[row + k] += rest;
                    }
                }
            }
        }
        let total = idle + grid_sum;
        if (total - prev_total).abs() > MASS_STEP_TOL {
            return Err(PhLabError::StepSize(format!(
                "mass moved by {:.3e} within one step at t = {t}",
                total - prev_total
            )));
        }
        if (total - start_total).abs() > MASS_DRIFT_TOL * (t + h).max(1.0) {
            return Err(PhLabError::StepSize(format!(
                "cumulative mass drift {:.3e} by t = {t}",
                total - start_total
            )));
        }
        prev_total = total;
        idle += idle_gain;
        std::mem::swap(&mut cur, &mut nxt);
        k_hi = (k_hi + 1).min(bins - 1);

        half_arrival(&mut cur, &mut idle, a, &mut n_hi, k_hi, bins, n_max, &mut trunc);

        // Shed top rows whose mass is far below every tolerance in play;
        // occupancy masses fall geometrically, so a generous cutoff still
        // strips most of the numerically dead range. The spare buffer is
        // cleared too: a later re-swap must not resurrect stale cells
        // above the active range.
        while n_hi > 1 {
            let row = (n_hi - 1) * bins;
            let s: f64 = cur[row..row + bins].iter().sum();
            if s >= ROW_SHED_FLOOR {
                break;
            }
            cur[row..row + bins].fill(0.0);
            nxt[row..row + bins].fill(0.0);
            trunc += s;
            n_hi -= 1;
        }

        traj.times.push(t + h);
        traj.b.push(flux_total / h);
        traj.idle.push(idle);
        traj.n_mean.push(n_sum);
    }

    traj.final_state = StateDistribution {
        h,
        n_max,
        bins,
        idle_mass: idle,
        grid: cur,
        truncation_tail: trunc,
    };
    Ok(traj)
}

/// Moves mass up one queue length with probability `a`, top row first so
/// nothing moves twice. Arrivals at the cap stay put and are tracked as
/// truncation.
#[allow(clippy::too_many_arguments)]
fn half_arrival(
    grid: &mut [f64],
    idle: &mut f64,
    a: f64,
    n_hi: &mut usize,
    k_hi: usize,
    bins: usize,
    n_max: usize,
    trunc: &mut f64,
) {
    if a == 0.0 {
        return;
    }
    let span = (k_hi + 1).min(bins);
    for n in (1..=*n_hi).rev() {
        let row = (n - 1) * bins;
        if n == n_max {
            let s: f64 = grid[row..row + span].iter().sum();
            *trunc += a * s;
            continue;
        }
        for k in 0..span {
            let moved = a * grid[row + k];
            if moved != 0.0 {
                grid[row + bins + k] += moved;
                grid[row + k] -= moved;
            }
        }
    }
    let moved = a * *idle;
    grid[0] += moved;
    *idle -= moved;
    *n_hi = (*n_hi + 1).min(n_max);
}

/// Runs the master equation under constant rate `c` from the empty state
/// until successive snapshots two time units apart differ by less than
/// [`STATIONARY_TV_TOL`] in total variation.
pub fn stationary_state(
    c: f64,
    d: &ServiceDistribution,
    grid: &GridSpec,
) -> Result<StateDistribution, PhLabError> {
    stationary_state_with_budget(c, d, grid, 10_000.0)
}

pub fn stationary_state_with_budget(
    c: f64,
    d: &ServiceDistribution,
    grid: &GridSpec,
    max_time: f64,
) -> Result<StateDistribution, PhLabError> {
    if !(0.0..1.0).contains(&c) {
        return Err(PhLabError::InvalidInput(format!("offered load {c} must lie in [0, 1)")));
    }
    let lam = RateFunction::constant(c);
    let chunk = 2.0;
    let mut state = grid.idle_state(d);
    let mut history = Vec::new();
    let mut t = 0.0;
    loop {
        let traj = evolve_master(&state, &lam, d, chunk)?;
        let next = traj.final_state;
        let tv = state.total_variation(&next)?;
        history.push(tv);
        state = next;
        t += chunk;
        if tv < STATIONARY_TV_TOL {
            return Ok(state);
        }
        if t >= max_time {
            return Err(PhLabError::NonConvergence {
                context: format!("stationary state at load {c} not reached by t = {t}"),
                history,
            });
        }
    }
}

/// One realized path: accepted arrival epochs, departures inside the
/// horizon, and the unfinished work right after each arrival.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub arrivals: Vec<f64>,
    pub departures: Vec<f64>,
    pub workload_samples: Vec<(f64, f64)>,
    /// Customers already in the system at time zero.
    pub initial_in_system: usize,
}

impl FlowTrace {
    /// Customers in the system at `t` (departures strictly before or at `t`
    /// have left).
    pub fn in_system_at(&self, t: f64) -> usize {
        let arrived = self.arrivals.partition_point(|&a| a <= t);
        let departed = self.departures.partition_point(|&d| d <= t);
        self.initial_in_system + arrived - departed
    }
}

/// FIFO departure times: pending initial work first, then each arrival
/// starts at `max(server free, arrival)`.
fn fifo_departures(initial_remaining: &[f64], arrivals: &[f64], services: &[f64]) -> Vec<f64> {
    let mut free = 0.0;
    let mut deps = Vec::with_capacity(initial_remaining.len() + arrivals.len());
    for &r in initial_remaining {
        free += r;
        deps.push(free);
    }
    for (&a, &s) in arrivals.iter().zip(services) {
        let start = if free > a { free } else { a };
        free = start + s;
        deps.push(free);
    }
    deps
}

/// Nonhomogeneous Poisson arrivals on `[0, horizon)` by thinning under the
/// declared cap.
pub(crate) fn thin_arrivals(lam: &RateFunction, horizon: f64, rng: &mut impl Rng) -> Vec<f64> {
    let cap = lam.cap();
    let mut out = Vec::new();
    if cap <= 0.0 {
        return out;
    }
    let exp = Exp::new(cap).expect("positive majorant");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= horizon {
            return out;
        }
        if rng.gen::<f64>() * cap < lam.eval(t) {
            out.push(t);
        }
    }
}

/// One realized path together with the work amounts behind it: the
/// remaining requirements of the customers present at time zero and the
/// service drawn for each accepted arrival.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub trace: FlowTrace,
    pub initial_works: Vec<f64>,
    pub services: Vec<f64>,
}

/// Simulates one path: thinned arrivals, i.i.d. service draws (the customer
/// already in service continues from its elapsed time), FIFO departures.
pub fn simulate_path(
    initial: &ServerConfiguration,
    lam: &RateFunction,
    d: &ServiceDistribution,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<FlowTrace, PhLabError> {
    simulate_path_detailed(initial, lam, d, horizon, rng).map(|s| s.trace)
}

/// `simulate_path` variant that keeps the drawn work amounts, for callers
/// that classify paths by offered work rather than by the trace alone.
pub fn simulate_path_detailed(
    initial: &ServerConfiguration,
    lam: &RateFunction,
    d: &ServiceDistribution,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<PathSample, PhLabError> {
    if !(horizon > 0.0) {
        return Err(PhLabError::InvalidInput("horizon must be positive".into()));
    }
    let mut initial_works = Vec::new();
    if let ServerConfiguration::Busy { n, tau } = *initial {
        initial_works.push(d.sample_residual(rng, tau)?);
        for _ in 1..n {
            initial_works.push(d.sample_one(rng));
        }
    }
    let arrivals = thin_arrivals(lam, horizon, rng);
    let services: Vec<f64> = arrivals.iter().map(|_| d.sample_one(rng)).collect();
    let trace = assemble_trace(initial_works.clone(), arrivals, &services, horizon);
    Ok(PathSample { trace, initial_works, services })
}

/// Deterministic-path hook: given arrival epochs and service requirements,
/// produces the same trace the stochastic path would.
pub fn simulate_forced(
    arrivals: &[f64],
    services: &[f64],
    horizon: f64,
) -> Result<FlowTrace, PhLabError> {
    if arrivals.len() != services.len() {
        return Err(PhLabError::InvalidInput("one service per arrival required".into()));
    }
    if arrivals.windows(2).any(|w| w[0] > w[1]) {
        return Err(PhLabError::InvalidInput("arrivals must be sorted".into()));
    }
    if services.iter().any(|s| !(*s > 0.0)) {
        return Err(PhLabError::InvalidInput("services must be positive".into()));
    }
    Ok(assemble_trace(Vec::new(), arrivals.to_vec(), services, horizon))
}

fn assemble_trace(
    initial_remaining: Vec<f64>,
    arrivals: Vec<f64>,
    services: &[f64],
    horizon: f64,
) -> FlowTrace {
    let n0 = initial_remaining.len();
    let deps = fifo_departures(&initial_remaining, &arrivals, services);
    let workload_samples: Vec<(f64, f64)> = arrivals
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, deps[n0 + i] - a))
        .collect();
    let departures: Vec<f64> = deps.into_iter().filter(|&t| t <= horizon).collect();
    FlowTrace { arrivals, departures, workload_samples, initial_in_system: n0 }
}

/// Exact unfinished-work function: jumps by the service amount at each
/// arrival, drains at unit rate, floors at zero.
#[derive(Debug, Clone)]
pub struct Workload {
    /// `(time, level right after the jump)`, time-ascending.
    knots: Vec<(f64, f64)>,
}

impl Workload {
    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&(tk, _)| tk <= t);
        if i == 0 {
            return self.knots[0].1;
        }
        let (tk, w) = self.knots[i - 1];
        (w - (t - tk)).max(0.0)
    }

    /// Maximal intervals where the work is strictly positive, clipped to
    /// `until`. An arrival landing exactly when the level reaches zero
    /// continues the interval.
    pub fn busy_intervals(&self, until: f64) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        let mut cur: Option<(f64, f64)> = None;
        for &(tk, w) in &self.knots {
            if w == 0.0 {
                continue;
            }
            let zero_at = tk + w;
            match cur {
                Some((s, e)) if tk <= e => cur = Some((s, zero_at.max(e))),
                Some(done) => {
                    out.push(done);
                    cur = Some((tk, zero_at));
                }
                None => cur = Some((tk, zero_at)),
            }
        }
        if let Some(c) = cur {
            out.push(c);
        }
        out.into_iter()
            .filter(|&(s, _)| s < until)
            .map(|(s, e)| (s, e.min(until)))
            .collect()
    }
}

/// Builds the workload of sorted arrivals with given service requirements,
/// starting from `initial_work` at `min(0, first arrival)`.
pub fn workload(
    arrivals: &[f64],
    services: &[f64],
    initial_work: f64,
) -> Result<Workload, PhLabError> {
    if arrivals.len() != services.len() {
        return Err(PhLabError::InvalidInput("one service per arrival required".into()));
    }
    if arrivals.windows(2).any(|w| w[0] > w[1]) {
        return Err(PhLabError::InvalidInput("arrivals must be sorted".into()));
    }
    if !(initial_work >= 0.0) {
        return Err(PhLabError::InvalidInput("initial work must be >= 0".into()));
    }
    let t0 = arrivals.first().copied().unwrap_or(0.0).min(0.0);
    let mut knots = vec![(t0, initial_work)];
    let mut t_prev = t0;
    let mut w = initial_work;
    for (&a, &s) in arrivals.iter().zip(services) {
        w = (w - (a - t_prev)).max(0.0) + s;
        knots.push((a, w));
        t_prev = a;
    }
    Ok(Workload { knots })
}

/// Outcome of the constructive coupling between two ordered arrival
/// intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingReport {
    pub replicas: usize,
    /// Paths where the lower process ended with more customers.
    pub violations: usize,
    /// Extra arrivals of the upper process live on `[0, delay_start)`.
    pub delay_start: f64,
    pub mean_n_lower: f64,
    pub mean_n_upper: f64,
}

/// First grid suffix start `a` where `chi1([a, B]) > chi2([a, B])`, if any.
/// Both rates must share a step.
pub fn suffix_order_violation(
    chi1: &RateFunction,
    chi2: &RateFunction,
    horizon: f64,
) -> Result<Option<f64>, PhLabError> {
    if chi1.step() != chi2.step() {
        return Err(PhLabError::InvalidInput("suffix comparison needs a common step".into()));
    }
    let h = chi1.step();
    let bins = (horizon / h).ceil() as usize;
    let tol = 1e-12 * (1.0 + chi1.cap().max(chi2.cap())) * horizon;
    for k in 0..=bins {
        let a = k as f64 * h;
        if chi1.integral(a, horizon) > chi2.integral(a, horizon) + tol {
            return Ok(Some(a));
        }
    }
    Ok(None)
}

/// Suffix masses `G(a_k) = integral(a_k, B)` on the shared grid.
fn suffix_masses(chi: &RateFunction, bins: usize, horizon: f64) -> Vec<f64> {
    let h = chi.step();
    let mut g = vec![0.0; bins + 1];
    for k in (0..bins).rev() {
        let a = k as f64 * h;
        let b = ((k + 1) as f64 * h).min(horizon);
        g[k] = g[k + 1] + chi.eval(a + 0.25 * (b - a)) * (b - a);
    }
    g
}

/// Minimal-delay time change: maps `x` to the latest-start suffix of the
/// upper rate carrying the same mass as the lower rate's suffix at `x`.
/// A small mass tolerance absorbs summation noise when the two curves tie,
/// e.g. across zero-rate plateaus of equal-total-mass inputs; nudging the
/// target only delays arrivals further, which keeps the coupling valid.
fn delay_map(g1: &[f64], g2: &[f64], h: f64, x: f64, horizon: f64) -> f64 {
    let xi = (x / h).clamp(0.0, (g1.len() - 1) as f64);
    let i = xi.floor() as usize;
    let frac = xi - i as f64;
    let target = if i + 1 < g1.len() {
        g1[i] + (g1[i + 1] - g1[i]) * frac
    } else {
        g1[g1.len() - 1]
    };
    let target = target - 1e-9 * (1.0 + g1[0]);
    // g2 is nonincreasing; find the last suffix still carrying the target.
    let j = g2.partition_point(|&v| v >= target);
    if j == 0 {
        return x.max(0.0);
    }
    if j >= g2.len() {
        return horizon;
    }
    let (hi, lo) = (g2[j - 1], g2[j]);
    let t = if hi > lo { (hi - target) / (hi - lo) } else { 1.0 };
    (((j - 1) as f64 + t) * h).clamp(x.max(0.0), horizon)
}

/// Checks the suffix order and, when it holds, couples the two processes:
/// the lower process's arrivals are delayed by the minimal time change into
/// the upper intensity, keeping their service draws, and independent extra
/// arrivals fill the upper intensity's head start. Each replica compares
/// the end-of-horizon queue lengths.
pub fn order_and_couple(
    chi1: &RateFunction,
    chi2: &RateFunction,
    d: &ServiceDistribution,
    horizon: f64,
    replicas: usize,
    rng: &mut impl Rng,
) -> Result<CouplingReport, PhLabError> {
    if let Some(a) = suffix_order_violation(chi1, chi2, horizon)? {
        return Err(PhLabError::Precondition(format!(
            "suffix order fails: the window [{a}, {horizon}] carries more lower-rate mass"
        )));
    }
    let h = chi1.step();
    let bins = (horizon / h).ceil() as usize;
    let g1 = suffix_masses(chi1, bins, horizon);
    let g2 = suffix_masses(chi2, bins, horizon);
    let delay_start = delay_map(&g1, &g2, h, 0.0, horizon);

    let mut violations = 0usize;
    let mut sum_n1 = 0.0;
    let mut sum_n2 = 0.0;
    for _ in 0..replicas {
        let arr1 = thin_arrivals(chi1, horizon, rng);
        let srv1: Vec<f64> = arr1.iter().map(|_| d.sample_one(rng)).collect();
        // Shared customers arrive later in the upper process, same service.
        let mut arr2: Vec<(f64, f64)> = arr1
            .iter()
            .zip(&srv1)
            .map(|(&a, &s)| (delay_map(&g1, &g2, h, a, horizon), s))
            .collect();
        // Extra customers of the upper process, before the map's range.
        for t in thin_arrivals(chi2, delay_start, rng) {
            arr2.push((t, d.sample_one(rng)));
        }
        arr2.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
        let (a2, s2): (Vec<f64>, Vec<f64>) = arr2.into_iter().unzip();

        let d1 = fifo_departures(&[], &arr1, &srv1);
        let d2 = fifo_departures(&[], &a2, &s2);
        let n1 = arr1.len() - d1.iter().filter(|&&t| t <= horizon).count();
        let n2 = a2.len() - d2.iter().filter(|&&t| t <= horizon).count();
        sum_n1 += n1 as f64;
        sum_n2 += n2 as f64;
        if n1 > n2 {
            violations += 1;
        }
    }
    Ok(CouplingReport {
        replicas,
        violations,
        delay_start,
        mean_n_lower: sum_n1 / replicas.max(1) as f64,
        mean_n_upper: sum_n2 / replicas.max(1) as f64,
    })
}
