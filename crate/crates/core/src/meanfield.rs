//! Closed network of single-server FIFO queues under uniform routing, and
//! the statistics that measure how close a large symmetric network runs to
//! the single-server fixed point: tagged-flow exponentiality, pairwise
//! queue-length decorrelation, and the pooled occupancy marginal.
//!
//! The simulation is event-driven. Every service completion draws a fresh
//! destination uniformly over all servers, the origin included, and the
//! customer joins that queue's tail. Service durations are i.i.d. draws
//! from one shared distribution. With `N` customers on `M` servers nothing
//! enters or leaves, so the total occupancy is conserved exactly and the
//! per-server load is pinned at `N / M`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;

use crate::dist::ServiceDistribution;
use crate::error::PhLabError;
use crate::nmp::{load_to_rate_with, LOAD_TOLERANCE};
use crate::queue::{stationary_state, GridSpec, ServerConfiguration, StateDistribution};
use crate::stats::{block_bootstrap_se, ks_p_value, ks_statistic, mean, pearson};

type Result<T> = std::result::Result<T, PhLabError>;

/// Minimum post-burn-in tagged arrivals before the flow tests run.
pub const MIN_FLOW_EVENTS: usize = 500;
/// Default spacing between queue-length checkpoints.
pub const DEFAULT_CHECKPOINT_DT: f64 = 1.0;
/// Default burn-in before any statistic is trusted.
pub const DEFAULT_BURN_IN: f64 = 100.0;
/// Grid step used whenever a statistic needs the single-server fixed
/// point. The load inversion runs on the same grid, so the discretization
/// bias of the reference state and of its rate cancel in the comparison.
const COMPARISON_STEP: f64 = 0.05;
/// Number of interarrival autocorrelation lags reported.
const FLOW_LAGS: usize = 10;
/// Relative arrival-rate drift between the first and last third of the
/// window that flags an unsettled burn-in.
const RATE_DRIFT_LIMIT: f64 = 0.2;
/// Pooled-marginal distance below which a run is classified as near the
/// mean-field limit. A coarse label, not an acceptance tolerance.
const NEAR_LIMIT_TV: f64 = 0.1;
/// Window, in time units, that one bootstrap block should span.
const BLOCK_SPAN: f64 = 20.0;
/// Bootstrap replicates behind every reported standard error.
const BOOTSTRAP_REPS: usize = 200;

/// How the customers are placed at time zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// Everyone queued at the first server; the farthest start from
    /// equilibrium.
    AllAtFirst,
    /// Customer `k` starts at server `k mod M`; services start fresh.
    #[default]
    RoundRobin,
    /// Each server drawn independently from the single-server fixed point
    /// at load `N / M`, then repaired by uniform single-customer moves
    /// until the total is exactly `N`.
    StationaryDraw,
}

/// Simulation request: network size, run length, bookkeeping density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub servers: usize,
    pub customers: usize,
    pub horizon: f64,
    pub checkpoint_dt: f64,
    pub placement: Placement,
}

impl NetworkConfig {
    pub fn new(servers: usize, customers: usize, horizon: f64) -> Self {
        Self {
            servers,
            customers,
            horizon,
            checkpoint_dt: DEFAULT_CHECKPOINT_DT,
            placement: Placement::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.servers == 0 {
            return Err(PhLabError::InvalidInput("network needs at least one server".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(PhLabError::InvalidInput(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if !(self.checkpoint_dt > 0.0) {
            return Err(PhLabError::InvalidInput(format!(
                "checkpoint spacing must be positive, got {}",
                self.checkpoint_dt
            )));
        }
        Ok(())
    }
}

/// One routing event: `customer` finished service at `server` and joined
/// the tail at `destination`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub server: u32,
    pub destination: u32,
    pub customer: u32,
}

/// Queue lengths frozen at one instant. Events landing exactly on a
/// checkpoint time are not yet applied: the snapshot is the left limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub lengths: Vec<u32>,
}

impl Checkpoint {
    pub fn total(&self) -> usize {
        self.lengths.iter().map(|&l| l as usize).sum()
    }
}

/// Full network configuration at one instant: FIFO contents per server
/// plus when each head-of-line customer entered service.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub clock: f64,
    pub queues: Vec<VecDeque<u32>>,
    /// Service start time of the head customer; meaningful iff the queue
    /// is nonempty.
    pub started: Vec<f64>,
}

impl NetworkState {
    pub fn total(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }

    /// The single-server view of server `i` at the state's clock.
    pub fn configuration(&self, i: usize) -> ServerConfiguration {
        let n = self.queues[i].len();
        if n == 0 {
            ServerConfiguration::Idle
        } else {
            ServerConfiguration::Busy { n, tau: (self.clock - self.started[i]).max(0.0) }
        }
    }
}

/// Arrival and departure instants observed at the tagged server (index 0).
/// Initial placement does not count as an arrival; both lists hold routing
/// events only and are sorted by construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaggedFlow {
    pub arrivals: Vec<f64>,
    pub departures: Vec<f64>,
}

impl TaggedFlow {
    /// Gaps between consecutive arrivals strictly after `burn_in`.
    pub fn gaps_after(&self, burn_in: f64) -> Vec<f64> {
        let post: Vec<f64> = self.arrivals.iter().copied().filter(|&t| t > burn_in).collect();
        post.windows(2).map(|w| w[1] - w[0]).collect()
    }

    fn arrivals_after(&self, burn_in: f64) -> usize {
        self.arrivals.iter().filter(|&&t| t > burn_in).count()
    }
}

/// Everything one simulation produces: time-ordered event log, periodic
/// queue-length checkpoints, the tagged server's flow, and the states
/// bracketing the run.
#[derive(Debug, Clone)]
pub struct NetworkRun {
    pub log: Vec<EventRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub tagged: TaggedFlow,
    pub initial: NetworkState,
    pub final_state: NetworkState,
}

/// Scheduled completion; the heap orders by time with server index as the
/// deterministic tie-break.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Completion {
    time: f64,
    server: usize,
}

impl Eq for Completion {}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.server.cmp(&other.server))
    }
}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Runs the closed network to the horizon.
///
/// Each completion consumes draws in a fixed order: destination first,
/// then the origin's next service if its queue stayed nonempty, then the
/// destination's service if it was idle. Identical seed and configuration
/// therefore reproduce the event log bit for bit.
pub fn simulate_network(
    cfg: &NetworkConfig,
    d: &ServiceDistribution,
    rng: &mut impl Rng,
) -> Result<NetworkRun> {
    cfg.validate()?;
    let m = cfg.servers;
    let (mut queues, mut started, mut heap) = place(cfg, d, rng)?;
    let mut in_service: Vec<bool> = queues.iter().map(|q| !q.is_empty()).collect();
    let initial = NetworkState { clock: 0.0, queues: queues.clone(), started: started.clone() };

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut tagged = TaggedFlow::default();
    let mut live_total = initial.total();
    let mut cp_index = 0u64;

    while let Some(Reverse(ev)) = heap.pop() {
        if ev.time > cfg.horizon {
            break;
        }
        flush_checkpoints(&mut checkpoints, &mut cp_index, cfg, ev.time, &queues, live_total);

        let i = ev.server;
        debug_assert!(in_service[i] && !queues[i].is_empty());
        let customer = queues[i].pop_front().expect("scheduled server has a head customer");
        in_service[i] = false;
        if i == 0 {
            tagged.departures.push(ev.time);
        }
        let dest = rng.gen_range(0..m);
        if dest == 0 {
            tagged.arrivals.push(ev.time);
        }
        queues[dest].push_back(customer);
        log.push(EventRecord {
            time: ev.time,
            server: i as u32,
            destination: dest as u32,
            customer,
        });
        // The customer moved but never left, so the total is untouched.
        debug_assert_eq!(live_total, cfg.customers);
        for s in [i, dest] {
            if !in_service[s] && !queues[s].is_empty() {
                started[s] = ev.time;
                in_service[s] = true;
                let dur = d.sample_one(rng);
                heap.push(Reverse(Completion { time: ev.time + dur, server: s }));
            }
        }
    }
    live_total = queues.iter().map(|q| q.len()).sum();
    flush_checkpoints(&mut checkpoints, &mut cp_index, cfg, f64::INFINITY, &queues, live_total);

    let final_state = NetworkState { clock: cfg.horizon, queues, started };
    Ok(NetworkRun { log, checkpoints, tagged, initial, final_state })
}

/// Emits every due checkpoint before the next event is applied.
fn flush_checkpoints(
    out: &mut Vec<Checkpoint>,
    cp_index: &mut u64,
    cfg: &NetworkConfig,
    upto: f64,
    queues: &[VecDeque<u32>],
    live_total: usize,
) {
    loop {
        let t = *cp_index as f64 * cfg.checkpoint_dt;
        if t > cfg.horizon || t > upto {
            return;
        }
        debug_assert_eq!(live_total, cfg.customers);
        out.push(Checkpoint { time: t, lengths: queues.iter().map(|q| q.len() as u32).collect() });
        *cp_index += 1;
    }
}

/// Builds the initial queues and schedules the first completions.
///
/// Draw order: for `StationaryDraw`, one configuration per server in
/// index order, then the repair moves, then one service draw per busy
/// server in index order. The fresh-start rules skip straight to the
/// service draws.
fn place(
    cfg: &NetworkConfig,
    d: &ServiceDistribution,
    rng: &mut impl Rng,
) -> Result<(Vec<VecDeque<u32>>, Vec<f64>, BinaryHeap<Reverse<Completion>>)> {
    let (m, n) = (cfg.servers, cfg.customers);
    let mut lengths = vec![0usize; m];
    let mut elapsed = vec![0.0f64; m];
    match cfg.placement {
        Placement::AllAtFirst => lengths[0] = n,
        Placement::RoundRobin => {
            for k in 0..n {
                lengths[k % m] += 1;
            }
        }
        Placement::StationaryDraw => {
            let rho = n as f64 / m as f64;
            let grid = GridSpec { h: COMPARISON_STEP, ..GridSpec::default() };
            let c = load_to_rate_with(rho, d, &grid, LOAD_TOLERANCE)?;
            if c > 0.0 {
                let sampler = stationary_state(c, d, &grid)?.sampler()?;
                for i in 0..m {
                    if let ServerConfiguration::Busy { n: k, tau } = sampler.sample(rng) {
                        lengths[i] = k;
                        elapsed[i] = tau;
                    }
                }
            }
            let mut total: usize = lengths.iter().sum();
            while total > n {
                let r = rng.gen_range(0..m);
                if lengths[r] > 0 {
                    lengths[r] -= 1;
                    if lengths[r] == 0 {
                        elapsed[r] = 0.0;
                    }
                    total -= 1;
                }
            }
            while total < n {
                let r = rng.gen_range(0..m);
                lengths[r] += 1;
                total += 1;
            }
        }
    }

    let mut queues: Vec<VecDeque<u32>> = Vec::with_capacity(m);
    let mut next_id = 0u32;
    for &l in &lengths {
        let mut q = VecDeque::with_capacity(l);
        for _ in 0..l {
            q.push_back(next_id);
            next_id += 1;
        }
        queues.push(q);
    }

    let mut started = vec![0.0f64; m];
    let mut heap = BinaryHeap::new();
    for i in 0..m {
        if lengths[i] == 0 {
            continue;
        }
        // A drawn elapsed service resumes from its conditional law; fresh
        // placements start from zero.
        let remaining = if elapsed[i] > 0.0 {
            started[i] = -elapsed[i];
            d.sample_residual(rng, elapsed[i])?
        } else {
            d.sample_one(rng)
        };
        heap.push(Reverse(Completion { time: remaining, server: i }));
    }
    Ok((queues, started, heap))
}

/// Reconstructs the flow at any server from the event log. For server 0
/// this reproduces `NetworkRun::tagged` exactly.
pub fn extract_flow(log: &[EventRecord], server: usize) -> TaggedFlow {
    let s = server as u32;
    TaggedFlow {
        arrivals: log.iter().filter(|e| e.destination == s).map(|e| e.time).collect(),
        departures: log.iter().filter(|e| e.server == s).map(|e| e.time).collect(),
    }
}

/// Replays the event log against the initial queues and errors on the
/// first departure that is not the oldest customer present.
pub fn verify_fifo(run: &NetworkRun) -> Result<()> {
    let mut queues = run.initial.queues.clone();
    for (at, ev) in run.log.iter().enumerate() {
        let s = ev.server as usize;
        match queues[s].pop_front() {
            Some(head) if head == ev.customer => {}
            Some(head) => {
                return Err(PhLabError::InvalidInput(format!(
                    "event {at}: server {s} released customer {} before {head}",
                    ev.customer
                )));
            }
            None => {
                return Err(PhLabError::InvalidInput(format!(
                    "event {at}: server {s} released a customer while empty"
                )));
            }
        }
        queues[ev.destination as usize].push_back(ev.customer);
    }
    Ok(())
}

/// Interarrival statistics at the tagged server(s).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStats {
    /// Post-burn-in arrival count, summed over the pooled flows.
    pub arrivals: usize,
    /// Tagged servers pooled into the sample.
    pub flows: usize,
    /// Arrival rate estimated on the held-out half of the gaps.
    pub rate: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    /// Gap autocorrelations at lags `1..=10`.
    pub autocorrelations: Vec<f64>,
    /// Two-sided 95% band for one autocorrelation under independence.
    pub band: f64,
    /// How many lags fall outside the band.
    pub deviations: usize,
    /// Exponentiality looks violated: small KS p-value or several
    /// out-of-band lags.
    pub suspect: bool,
    /// Relative arrival-rate change between the first and last third of
    /// the window.
    pub rate_drift: f64,
    /// The rate was still drifting, so the burn-in looks too short.
    pub burn_in_suspect: bool,
}

/// Time-averaged queue-length correlation between servers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub correlation: f64,
    /// Block-bootstrap standard error over time.
    pub std_error: f64,
    /// Checkpoints entering the average.
    pub samples: usize,
    /// Disjoint server pairs pooled into the estimate.
    pub pairs: usize,
}

/// Distance between the pooled occupancy marginal and the single-server
/// fixed point at the network's load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointGap {
    /// Customers per server.
    pub load: f64,
    /// Arrival rate whose fixed point carries that load.
    pub rate: f64,
    /// Total variation between the pooled queue-length marginal and the
    /// fixed point's.
    pub tv: f64,
    /// Server-checkpoint samples pooled.
    pub pooled: usize,
    /// Pooled mean queue length; equals the load exactly by conservation.
    pub mean_queue: f64,
    /// Coarse classification: the marginal sits within 0.1 of the fixed
    /// point.
    pub near_limit: bool,
}

/// Bundle of the three independence diagnostics. Each part is present
/// when its test has run.
#[derive(Debug, Clone, Default)]
pub struct ChaosReport {
    pub flow: Option<FlowStats>,
    pub pair: Option<PairStats>,
    pub fixed_point: Option<FixedPointGap>,
}

impl ChaosReport {
    /// Range checks on everything present: probabilities in `[0, 1]`,
    /// correlations in `[-1, 1]`, distances in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.flow {
            if !(0.0..=1.0).contains(&f.ks_p_value) {
                return Err(PhLabError::InvalidInput(format!(
                    "KS p-value {} outside [0, 1]",
                    f.ks_p_value
                )));
            }
            if f.autocorrelations.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(PhLabError::InvalidInput(
                    "autocorrelation outside [-1, 1]".into(),
                ));
            }
        }
        if let Some(p) = &self.pair {
            if !(-1.0..=1.0).contains(&p.correlation) || !(p.std_error >= 0.0) {
                return Err(PhLabError::InvalidInput(format!(
                    "pair correlation {} +- {} out of range",
                    p.correlation, p.std_error
                )));
            }
        }
        if let Some(g) = &self.fixed_point {
            if !(0.0..=1.0).contains(&g.tv) {
                return Err(PhLabError::InvalidInput(format!(
                    "total variation {} outside [0, 1]",
                    g.tv
                )));
            }
        }
        Ok(())
    }
}

/// Tests the tagged interarrival gaps for exponentiality and serial
/// independence.
pub fn tagged_flow_tests(flow: &TaggedFlow, burn_in: f64) -> Result<ChaosReport> {
    pooled_flow_tests(std::slice::from_ref(flow), burn_in)
}

/// Flow tests over several tagged servers at once. Gaps are taken within
/// one server's arrival sequence, never across servers, so short windows
/// still add up to a usable sample.
///
/// The exponential rate is estimated on the even-indexed gaps and the KS
/// statistic evaluated on the odd-indexed ones: estimating the rate on
/// the same sample that feeds the test would shrink the statistic and
/// wreck the null distribution, while the held-out split keeps the
/// p-value exactly uniform under the null.
pub fn pooled_flow_tests(flows: &[TaggedFlow], burn_in: f64) -> Result<ChaosReport> {
    let arrivals: usize = flows.iter().map(|f| f.arrivals_after(burn_in)).sum();
    if arrivals < MIN_FLOW_EVENTS {
        return Err(PhLabError::InsufficientPower(format!(
            "{arrivals} tagged arrivals after burn-in, need {MIN_FLOW_EVENTS}"
        )));
    }
    let per_flow: Vec<Vec<f64>> = flows.iter().map(|f| f.gaps_after(burn_in)).collect();
    let gaps: Vec<f64> = per_flow.iter().flatten().copied().collect();
    let train: Vec<f64> = gaps.iter().copied().step_by(2).collect();
    let test: Vec<f64> = gaps.iter().copied().skip(1).step_by(2).collect();
    let rate = 1.0 / mean(&train);
    let ks = ks_statistic(&test, |x| 1.0 - (-rate * x).exp())?;
    let p = ks_p_value(ks, test.len());

    let band = 1.96 / (gaps.len() as f64).sqrt();
    let autocorrelations: Vec<f64> =
        (1..=FLOW_LAGS).map(|l| pooled_autocorrelation(&per_flow, &gaps, l)).collect::<Result<_>>()?;
    let deviations = autocorrelations.iter().filter(|a| a.abs() > band).count();
    let rate_drift = window_rate_drift(flows, burn_in);

    let report = ChaosReport {
        flow: Some(FlowStats {
            arrivals,
            flows: flows.len(),
            rate,
            ks_statistic: ks,
            ks_p_value: p,
            autocorrelations,
            band,
            deviations,
            suspect: p < 0.01 || deviations > 2,
            rate_drift,
            burn_in_suspect: rate_drift.abs() > RATE_DRIFT_LIMIT,
        }),
        ..ChaosReport::default()
    };
    report.validate()?;
    Ok(report)
}

/// Lagged correlation with the mean and normalization taken over all
/// gaps but lag products confined to one flow. For a single flow this is
/// the ordinary sample autocorrelation.
fn pooled_autocorrelation(per_flow: &[Vec<f64>], all: &[f64], lag: usize) -> Result<f64> {
    if all.len() <= lag + 1 {
        return Err(PhLabError::InsufficientPower(format!(
            "need more than {} gaps for lag-{lag} autocorrelation, got {}",
            lag + 1,
            all.len()
        )));
    }
    let m = mean(all);
    let denom: f64 = all.iter().map(|x| (x - m) * (x - m)).sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let num: f64 = per_flow
        .iter()
        .filter(|g| g.len() > lag)
        .map(|g| {
            g[..g.len() - lag].iter().zip(&g[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>()
        })
        .sum();
    Ok(num / denom)
}

/// Relative change of the pooled arrival rate between the first and last
/// third of the observation window; near zero once the flow has settled.
fn window_rate_drift(flows: &[TaggedFlow], burn_in: f64) -> f64 {
    let t_hi = flows
        .iter()
        .filter_map(|f| f.arrivals.last())
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = t_hi - burn_in;
    if !(span > 0.0) {
        return 0.0;
    }
    let third = span / 3.0;
    let count = |a: f64, b: f64| -> usize {
        flows
            .iter()
            .map(|f| f.arrivals.iter().filter(|&&t| t > a && t <= b).count())
            .sum()
    };
    let head = count(burn_in, burn_in + third);
    let tail = count(t_hi - third, t_hi);
    if head + tail == 0 {
        return 0.0;
    }
    (tail as f64 - head as f64) / ((head + tail) as f64 / 2.0)
}

/// Time-averaged Pearson correlation between two servers' queue lengths,
/// with a block-bootstrap standard error that respects the serial
/// dependence of the trajectory.
pub fn pair_correlation(
    checkpoints: &[Checkpoint],
    pair: (usize, usize),
    burn_in: f64,
    rng: &mut impl Rng,
) -> Result<PairStats> {
    let (i, j) = pair;
    if i == j {
        return Err(PhLabError::InvalidInput(format!(
            "pair correlation needs two distinct servers, got ({i}, {j})"
        )));
    }
    let series: Vec<(f64, f64)> = checkpoints
        .iter()
        .filter(|cp| cp.time > burn_in)
        .map(|cp| (cp.lengths[i] as f64, cp.lengths[j] as f64))
        .collect();
    let xs: Vec<f64> = series.iter().map(|&(x, _)| x).collect();
    let ys: Vec<f64> = series.iter().map(|&(_, y)| y).collect();
    let correlation = pearson(&xs, &ys)?;
    let block = block_length(checkpoints, series.len());
    // A resampled block can be degenerate even when the full series is
    // not; those replicates contribute a zero rather than aborting.
    let std_error = block_bootstrap_se(&series, block, BOOTSTRAP_REPS, rng, |w| {
        let (a, b): (Vec<f64>, Vec<f64>) = w.iter().copied().unzip();
        pearson(&a, &b).unwrap_or(0.0)
    })?;
    Ok(PairStats { correlation, std_error, samples: series.len(), pairs: 1 })
}

/// Pools the standardized cross-products of the disjoint pairs
/// `(0, 1), (2, 3), ...` into one decorrelation estimate. Pooling over
/// pairs is what buys the precision a single pair cannot reach; the
/// bootstrap runs over time, so dependence common to all pairs is still
/// priced into the standard error.
pub fn mean_pair_correlation(
    checkpoints: &[Checkpoint],
    burn_in: f64,
    rng: &mut impl Rng,
) -> Result<PairStats> {
    let post: Vec<&Checkpoint> = checkpoints.iter().filter(|cp| cp.time > burn_in).collect();
    let m = match post.first() {
        Some(cp) => cp.lengths.len(),
        None => {
            return Err(PhLabError::InsufficientPower(
                "no checkpoints after burn-in".into(),
            ))
        }
    };
    if m < 2 {
        return Err(PhLabError::InvalidInput(
            "pair pooling needs at least two servers".into(),
        ));
    }

    let len = post.len();
    let mut pooled = vec![0.0f64; len];
    let mut pairs = 0usize;
    for p in 0..m / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        let zi = standardized(&post, i);
        let zj = standardized(&post, j);
        let (zi, zj) = match (zi, zj) {
            (Some(a), Some(b)) => (a, b),
            // A constant series carries no correlation signal; skip the
            // pair rather than divide by zero.
            _ => continue,
        };
        for k in 0..len {
            pooled[k] += zi[k] * zj[k];
        }
        pairs += 1;
    }
    if pairs == 0 {
        return Err(PhLabError::DegenerateInput(
            "every disjoint pair has a constant queue-length series".into(),
        ));
    }
    for v in &mut pooled {
        *v /= pairs as f64;
    }
    let correlation = mean(&pooled);
    let block = block_length(checkpoints, len);
    let std_error = block_bootstrap_se(&pooled, block, BOOTSTRAP_REPS, rng, |w| mean(w))?;
    Ok(PairStats { correlation, std_error, samples: len, pairs })
}

/// Standardizes one server's post-burn-in series; `None` if constant.
fn standardized(post: &[&Checkpoint], i: usize) -> Option<Vec<f64>> {
    let xs: Vec<f64> = post.iter().map(|cp| cp.lengths[i] as f64).collect();
    let mu = mean(&xs);
    let sd = (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt();
    if sd == 0.0 {
        return None;
    }
    Some(xs.into_iter().map(|x| (x - mu) / sd).collect())
}

/// Picks a bootstrap block long enough to span `BLOCK_SPAN` time units,
/// clamped so the series still holds two blocks.
fn block_length(checkpoints: &[Checkpoint], len: usize) -> usize {
    let dt = checkpoints
        .windows(2)
        .map(|w| w[1].time - w[0].time)
        .find(|&d| d > 0.0)
        .unwrap_or(DEFAULT_CHECKPOINT_DT);
    ((BLOCK_SPAN / dt).round() as usize).clamp(1, (len / 2).max(1))
}

/// Pools every post-burn-in server-checkpoint occupancy into one marginal
/// and measures its total-variation distance to the single-server fixed
/// point at the same load.
pub fn compare_to_fixed_point(
    checkpoints: &[Checkpoint],
    d: &ServiceDistribution,
    burn_in: f64,
) -> Result<FixedPointGap> {
    let post: Vec<&Checkpoint> = checkpoints.iter().filter(|cp| cp.time > burn_in).collect();
    let first = post.first().ok_or_else(|| {
        PhLabError::InsufficientPower("no checkpoints after burn-in".into())
    })?;
    let m = first.lengths.len();
    let n = first.total();
    let rho = n as f64 / m as f64;

    let grid = GridSpec { h: COMPARISON_STEP, ..GridSpec::default() };
    let rate = load_to_rate_with(rho, d, &grid, LOAD_TOLERANCE)?;
    let nu = if rate > 0.0 { stationary_state(rate, d, &grid)? } else { grid.idle_state(d) };

    let mut hist: Vec<u64> = vec![0; nu.n_max() + 1];
    let mut pooled = 0u64;
    let mut mass_sum = 0.0f64;
    for cp in &post {
        for &l in &cp.lengths {
            let l = l as usize;
            if l >= hist.len() {
                hist.resize(l + 1, 0);
            }
            hist[l] += 1;
            mass_sum += l as f64;
        }
        pooled += cp.lengths.len() as u64;
    }
    let mut tv = nu.truncation_tail();
    for (k, &count) in hist.iter().enumerate() {
        let model = if k == 0 {
            nu.idle_mass()
        } else if k <= nu.n_max() {
            nu.queue_length_mass(k)
        } else {
            0.0
        };
        tv += (count as f64 / pooled as f64 - model).abs();
    }
    let tv = 0.5 * tv;
    Ok(FixedPointGap {
        load: rho,
        rate,
        tv,
        pooled: pooled as usize,
        mean_queue: mass_sum / pooled as f64,
        near_limit: tv < NEAR_LIMIT_TV,
    })
}

/// Exchangeable snapshot of a network: each server's configuration as an
/// atom of weight `1/M`, exact ties merged.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<(ServerConfiguration, f64)>,
}

/// Projects a network state onto its empirical single-server measure.
pub fn symmetrize(state: &NetworkState) -> EmpiricalMeasure {
    let m = state.queues.len();
    let mut configs: Vec<(usize, f64)> = (0..m)
        .map(|i| match state.configuration(i) {
            ServerConfiguration::Idle => (0, 0.0),
            ServerConfiguration::Busy { n, tau } => (n, tau),
        })
        .collect();
    configs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut atoms = Vec::new();
    let mut at = 0;
    while at < configs.len() {
        let (n, tau) = configs[at];
        let mut run = at + 1;
        while run < configs.len() && configs[run] == (n, tau) {
            run += 1;
        }
        let cfg = if n == 0 {
            ServerConfiguration::Idle
        } else {
            ServerConfiguration::Busy { n, tau }
        };
        atoms.push((cfg, (run - at) as f64 / m as f64));
        at = run;
    }
    EmpiricalMeasure { atoms }
}

impl EmpiricalMeasure {
    pub fn atoms(&self) -> &[(ServerConfiguration, f64)] {
        &self.atoms
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|&(_, w)| w).sum()
    }

    /// Mean queue length under the measure; `N / M` exactly for a
    /// symmetrized network state.
    pub fn mean_queue(&self) -> f64 {
        self.atoms
            .iter()
            .map(|&(cfg, w)| match cfg {
                ServerConfiguration::Idle => 0.0,
                ServerConfiguration::Busy { n, .. } => n as f64 * w,
            })
            .sum()
    }

    /// Bins the atoms onto a master-equation grid. Errors if a queue is
    /// taller than the grid or a service older than the tail support;
    /// clamping either would silently move mass.
    pub fn to_state(&self, d: &ServiceDistribution, grid: &GridSpec) -> Result<StateDistribution> {
        let bins = grid.bins_for(d);
        let mut cells = vec![0.0f64; grid.n_max * bins];
        let mut idle = 0.0f64;
        for &(cfg, w) in &self.atoms {
            match cfg {
                ServerConfiguration::Idle => idle += w,
                ServerConfiguration::Busy { n, tau } => {
                    if n > grid.n_max {
                        return Err(PhLabError::InvalidInput(format!(
                            "queue length {n} above the grid cap {}",
                            grid.n_max
                        )));
                    }
                    let k = (tau / grid.h).floor() as usize;
                    if k >= bins {
                        return Err(PhLabError::InvalidInput(format!(
                            "elapsed service {tau} beyond the grid tail {}",
                            bins as f64 * grid.h
                        )));
                    }
                    cells[(n - 1) * bins + k] += w;
                }
            }
        }
        StateDistribution::from_masses(grid.h, grid.n_max, bins, idle, cells, 0.0)
    }
}
