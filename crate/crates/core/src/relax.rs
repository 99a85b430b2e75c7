//! Abstract laboratory for the question "when does a self-consistent rate
//! settle to a constant?". The object of study is a family of step
//! densities `q_x` on the positive axis and the equation
//! `f(x) = [f * q_x](x)` for `x >= 0` with prescribed data on `x < 0`.
//!
//! The monotone iteration builds the unique solution from below; its limit
//! is a renewal-type function. Whether that limit flattens out depends on
//! the family: a compact support plus a pointwise floor forces relaxation,
//! while shift-structured counterexample families lock the associated
//! walker into unit cells and keep oscillations alive. The walker view is
//! made literal here: absorption estimates for the leftward walk and exact
//! localization checks for the counterexamples.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dist::ServiceDistribution;
use crate::error::PhLabError;
use crate::queue::RateFunction;
use crate::stats::{mean, variance, wilson_interval};
use crate::streams;

type Result<T> = std::result::Result<T, PhLabError>;

/// Grid step of the laboratory; matches the service-distribution tables.
pub const LAB_STEP: f64 = 0.01;
/// A window oscillation below this counts as relaxed.
pub const RELAX_OSC_TOL: f64 = 1e-4;
/// Default sup-norm increment at which the iteration is declared
/// converged.
pub const ITERATION_TOL: f64 = 1e-10;
/// Default per-replica step budget for walkers.
pub const DEFAULT_MAX_WALK_STEPS: usize = 1_000_000;
/// Mass identity tolerance for kernel families.
pub const KERNEL_MASS_TOL: f64 = 1e-9;
const MAX_PASSES: usize = 20_000;
const WALKER_GROUPS: usize = 20;

type Density = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Mass = Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
type Sampler = Box<dyn Fn(f64, &mut ChaCha8Rng) -> f64 + Send + Sync>;
type Profile = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// A family of step densities `q_x`, one per anchor `x >= 0`, with the
/// declared analytic structure the theorems feed on: an envelope `[0,
/// t_max]` holding all but `tail_slack` of the mass, an optional pointwise
/// floor on that envelope, a `beta`-moment bound, and a density cap.
///
/// Exact bin masses are part of the contract: every built-in family
/// integrates its own density in closed form, so mass checks and
/// convolutions carry no quadrature error from the kernel side.
pub struct KernelFamily {
    label: &'static str,
    density: Density,
    mass: Mass,
    sampler: Sampler,
    t_max: f64,
    tail_slack: f64,
    floor: Option<Profile>,
    beta: f64,
    moment_bound: f64,
    cap: f64,
    /// True when `q_x` does not depend on `x`; lets grid code cache one
    /// kernel row.
    stationary: bool,
}

impl fmt::Debug for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelFamily")
            .field("label", &self.label)
            .field("t_max", &self.t_max)
            .field("tail_slack", &self.tail_slack)
            .field("floored", &self.floor.is_some())
            .field("beta", &self.beta)
            .field("moment_bound", &self.moment_bound)
            .field("cap", &self.cap)
            .finish()
    }
}

impl KernelFamily {
    /// The same service density at every anchor; the iteration then is
    /// classical renewal theory.
    pub fn stationary(d: &ServiceDistribution) -> Self {
        let table = d.density_table();
        let cap = table.values().iter().cloned().fold(0.0, f64::max);
        let h = table.step();
        let moment = table
            .values()
            .iter()
            .enumerate()
            .map(|(j, &v)| (j as f64 * h).powi(2) * v * h)
            .sum::<f64>();
        let (d1, d2, d3) = (d.clone(), d.clone(), d.clone());
        Self {
            label: "stationary",
            density: Box::new(move |_, t| d1.pdf(t)),
            mass: Box::new(move |_, a, b| (d2.cdf(b) - d2.cdf(a)).max(0.0)),
            sampler: Box::new(move |_, rng| d3.sample_one(rng)),
            t_max: d.tail_cut(),
            tail_slack: 1e-7,
            floor: None,
            beta: 2.0,
            moment_bound: moment + 1.0,
            cap,
            stationary: true,
        }
    }

    /// Unit-uniform steps at every anchor: compact support, floor 1,
    /// cap 1. The tamest relaxing family there is.
    pub fn uniform_step() -> Self {
        Self {
            label: "uniform",
            density: Box::new(|_, t| if (0.0..=1.0).contains(&t) { 1.0 } else { 0.0 }),
            mass: Box::new(|_, a, b| (b.min(1.0) - a.max(0.0)).max(0.0)),
            sampler: Box::new(|_, rng| rng.gen::<f64>()),
            t_max: 1.0,
            tail_slack: 0.0,
            floor: Some(Box::new(|_| 1.0)),
            beta: 2.0,
            moment_bound: 1.0 / 3.0,
            cap: 1.0,
            stationary: true,
        }
    }

    /// Anchor-dependent blend of the unit uniform with the increasing
    /// triangular density `2t` on `[0, 1]`. The blend weight
    /// `w(x) = 0.4 (1 + sin x)` stays within `[0, 0.8]`, so the density
    /// never falls below `0.2`; the declared floor is `0.1`.
    pub fn blended_step() -> Self {
        fn w(x: f64) -> f64 {
            0.4 * (1.0 + x.sin())
        }
        fn cdf(x: f64, t: f64) -> f64 {
            let t = t.clamp(0.0, 1.0);
            (1.0 - w(x)) * t + w(x) * t * t
        }
        Self {
            label: "blended",
            density: Box::new(|x, t| {
                if (0.0..=1.0).contains(&t) {
                    (1.0 - w(x)) + 2.0 * w(x) * t
                } else {
                    0.0
                }
            }),
            mass: Box::new(|x, a, b| (cdf(x, b) - cdf(x, a)).max(0.0)),
            sampler: Box::new(|x, rng| {
                let u = rng.gen::<f64>();
                let w = w(x);
                if w < 1e-12 {
                    u
                } else {
                    let lin = 1.0 - w;
                    ((lin * lin + 4.0 * w * u).sqrt() - lin) / (2.0 * w)
                }
            }),
            t_max: 1.0,
            tail_slack: 0.0,
            floor: Some(Box::new(|_| 0.1)),
            beta: 2.0,
            moment_bound: 0.5,
            cap: 1.8,
            stationary: false,
        }
    }

    /// Steps with the heavy density `alpha (1 + t)^{-(alpha + 1)}`; finite
    /// second moment needs `alpha > 2`. The leftward walker under these
    /// steps can overshoot a target interval, which is exactly what the
    /// absorption estimates quantify.
    pub fn pareto_steps(alpha: f64) -> Result<Self> {
        if !(alpha > 2.0) || !alpha.is_finite() {
            return Err(PhLabError::InvalidInput(format!(
                "step exponent must exceed 2 for a finite second moment, got {alpha}"
            )));
        }
        let moment = alpha * (1.0 / (alpha - 2.0) - 2.0 / (alpha - 1.0) + 1.0 / alpha);
        let slack = 1e-9f64;
        Ok(Self {
            label: "pareto",
            density: Box::new(move |_, t| {
                if t >= 0.0 {
                    alpha * (1.0 + t).powf(-alpha - 1.0)
                } else {
                    0.0
                }
            }),
            mass: Box::new(move |_, a, b| {
                let tail = |s: f64| (1.0 + s.max(0.0)).powf(-alpha);
                (tail(a) - tail(b)).max(0.0)
            }),
            sampler: Box::new(move |_, rng| (1.0 - rng.gen::<f64>()).powf(-1.0 / alpha) - 1.0),
            t_max: slack.powf(-1.0 / alpha) - 1.0,
            tail_slack: slack,
            floor: None,
            beta: 2.0,
            moment_bound: moment,
            cap: alpha,
            stationary: true,
        })
    }

    pub fn label(&self) -> &'static str {
        self.label
    }

    pub fn density(&self, x: f64, t: f64) -> f64 {
        (self.density)(x, t)
    }

    /// Exact mass of `q_x` on `[a, b]`.
    pub fn mass(&self, x: f64, a: f64, b: f64) -> f64 {
        (self.mass)(x, a.max(0.0), b)
    }

    pub fn sample_step(&self, x: f64, rng: &mut ChaCha8Rng) -> f64 {
        (self.sampler)(x, rng)
    }

    pub fn support_bound(&self) -> f64 {
        self.t_max
    }

    pub fn floor_at(&self, t: f64) -> Option<f64> {
        self.floor.as_ref().map(|k| k(t))
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn moment_bound(&self) -> f64 {
        self.moment_bound
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Verifies the mass identity at the probe anchors: each `q_x` must
    /// put `1 ± tol` on the declared envelope, with `tol` the family's
    /// tail slack plus the mass tolerance.
    pub fn check_mass(&self, probes: &[f64]) -> Result<()> {
        for &x in probes {
            let m = self.mass(x, 0.0, self.t_max);
            if (m - 1.0).abs() > self.tail_slack + KERNEL_MASS_TOL {
                return Err(PhLabError::InvalidInput(format!(
                    "kernel at anchor {x} carries mass {m} on its envelope"
                )));
            }
        }
        Ok(())
    }

    /// Smallest horizon `K` with `q_x([0, K]) >= 1 - eps` for every probe
    /// anchor, located by bisection on the exact mass.
    pub fn compactness_bound(&self, eps: f64, probes: &[f64]) -> Result<f64> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(PhLabError::InvalidInput(format!("tail level must be in (0, 1), got {eps}")));
        }
        let mut worst = 0.0f64;
        for &x in probes {
            let (mut lo, mut hi) = (0.0, self.t_max.max(1.0));
            if self.mass(x, 0.0, hi) < 1.0 - eps {
                return Err(PhLabError::Precondition(format!(
                    "kernel at anchor {x} keeps more than {eps} beyond its envelope"
                )));
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if self.mass(x, 0.0, mid) >= 1.0 - eps {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            worst = worst.max(hi);
        }
        Ok(worst)
    }

    /// Least mass any measurable subset of `[0, t_cap]` of measure
    /// `delta` can carry, minimized over the probe anchors. For densities
    /// tabulated on a grid the minimizer is the greedy pick of the
    /// lowest-mass bins, so the greedy value is exact up to binning.
    pub fn mass_floor(&self, t_cap: f64, delta: f64, h: f64, probes: &[f64]) -> Result<f64> {
        if !(h > 0.0) || !(t_cap > 0.0) || !(delta > 0.0) || delta > t_cap {
            return Err(PhLabError::InvalidInput(format!(
                "need 0 < delta <= t_cap and positive step, got delta={delta}, t_cap={t_cap}, h={h}"
            )));
        }
        let bins = (t_cap / h).ceil() as usize;
        let take = ((delta / h).round() as usize).clamp(1, bins);
        let mut worst = f64::INFINITY;
        for &x in probes {
            let mut masses: Vec<f64> =
                (0..bins).map(|j| self.mass(x, j as f64 * h, (j + 1) as f64 * h)).collect();
            masses.sort_by(|a, b| a.total_cmp(b));
            worst = worst.min(masses[..take].iter().sum());
        }
        Ok(worst)
    }
}

/// The boundary data together with the current iterate of
/// `f(x) = [f * q_x](x)`, all on one grid. `values` spans
/// `[-extent, x_max]`; the first `offset` entries are the frozen boundary,
/// the rest the growing solution on `x >= 0`.
#[derive(Debug, Clone)]
pub struct IterationState {
    h: f64,
    offset: usize,
    values: Vec<f64>,
    index: usize,
    increments: Vec<f64>,
}

impl IterationState {
    /// `boundary[j]` is the value at `x = (j - (len - 1)) h`: the slice
    /// reads left to right along `[-extent, 0)` with
    /// `extent = (len - 1) h`, and its last entry is the left limit at
    /// zero. Carrying that limit separately from the iterate's own value
    /// at zero keeps the jump between data and solution sharp instead of
    /// smearing it over one grid cell. The iterate starts at zero
    /// everywhere on `x >= 0`.
    pub fn new(boundary: Vec<f64>, h: f64, x_max: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(PhLabError::InvalidInput(format!("grid step must be positive, got {h}")));
        }
        if !(x_max >= h) {
            return Err(PhLabError::InvalidInput(format!(
                "iteration range {x_max} shorter than one step {h}"
            )));
        }
        if boundary.is_empty() || boundary.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PhLabError::InvalidInput(
                "boundary data must be nonempty, finite and nonnegative".into(),
            ));
        }
        let offset = boundary.len();
        let nodes = (x_max / h).round() as usize + 1;
        let mut values = boundary;
        values.extend(std::iter::repeat(0.0).take(nodes));
        Ok(Self { h, offset, values, index: 0, increments: Vec::new() })
    }

    /// Constant boundary `level` on `[-extent, 0)`.
    pub fn constant_boundary(level: f64, extent: f64, h: f64, x_max: f64) -> Result<Self> {
        if !(extent > 0.0) || !(level >= 0.0) {
            return Err(PhLabError::InvalidInput(format!(
                "need a positive extent and nonnegative level, got {extent}, {level}"
            )));
        }
        let len = (extent / h).round() as usize + 1;
        Self::new(vec![level; len], h, x_max)
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Sup-norm increment of each pass taken so far.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// The iterate on `x >= 0`; entry `i` sits at `x = i h`.
    pub fn iterate(&self) -> &[f64] {
        &self.values[self.offset..]
    }

    pub fn boundary(&self) -> &[f64] {
        &self.values[..self.offset]
    }

    /// `f` at grid index `i` (negative indices reach into the boundary;
    /// outside the stored range the data is zero). Index zero is the
    /// iterate's value; the boundary's side of that point is
    /// `left_limit`.
    fn node(&self, i: isize) -> f64 {
        let at = if i >= 0 { i + self.offset as isize } else { i + self.offset as isize - 1 };
        if (0..self.values.len() as isize).contains(&at) {
            self.values[at as usize]
        } else {
            0.0
        }
    }

    fn left_limit(&self) -> f64 {
        self.values[self.offset - 1]
    }

    /// `f` at the upper endpoint of an argument bin, read from the bin's
    /// interior side: at zero that is the boundary's left limit, at the
    /// boundary's own left edge the zero extension below it.
    fn upper_node(&self, k: isize) -> f64 {
        if k == 0 {
            self.left_limit()
        } else if k <= -(self.offset as isize - 1) {
            0.0
        } else {
            self.node(k)
        }
    }

    fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// One kernel row as exact bin masses on the iteration grid.
fn kernel_row(family: &KernelFamily, x: f64, h: f64, bins: usize) -> Vec<f64> {
    (0..bins).map(|j| family.mass(x, j as f64 * h, (j + 1) as f64 * h)).collect()
}

/// Applies `steps` passes of the monotone build-up: each pass replaces
/// the iterate by the convolution of the full current function with the
/// anchor's kernel,
/// reading the kernel as exact bin masses and the function as its
/// trapezoid average over each bin. Mass exactness keeps constant
/// plateaus pinned; the trapezoid makes the error second order in the
/// step.
pub fn iterate_self_averaging(
    state: &IterationState,
    family: &KernelFamily,
    steps: usize,
) -> Result<IterationState> {
    if state.sup() > family.cap() + 1e-9 {
        return Err(PhLabError::Precondition(format!(
            "data reaches {}, above the family cap {}",
            state.sup(),
            family.cap()
        )));
    }
    let h = state.h;
    let bins = (family.support_bound() / h).ceil() as usize;
    let mut out = state.clone();
    let cached = if family.stationary { Some(kernel_row(family, 0.0, h, bins)) } else { None };
    let mut fresh = vec![0.0f64; out.iterate().len()];
    for _ in 0..steps {
        let mut sup_inc = 0.0f64;
        for i in 0..fresh.len() {
            let x = i as f64 * h;
            let local;
            let row = match &cached {
                Some(r) => r,
                None => {
                    local = kernel_row(family, x, h, bins);
                    &local
                }
            };
            let mut acc = 0.0;
            for (j, &m) in row.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                // Endpoint values are read from each bin's interior
                // side, which keeps the jumps at zero and at the
                // boundary's left edge from smearing into the cells.
                let (i, j) = (i as isize, j as isize);
                acc += m * 0.5 * (out.upper_node(i - j) + out.node(i - j - 1));
            }
            let old = out.values[out.offset + i];
            // The build-up from zero initial data never moves down.
            debug_assert!(acc >= old - 1e-12);
            sup_inc = sup_inc.max(acc - old);
            fresh[i] = acc;
        }
        out.values[out.offset..].copy_from_slice(&fresh);
        out.index += 1;
        out.increments.push(sup_inc);
    }
    Ok(out)
}

/// Iterates until the sup-norm increment falls below `tol`.
pub fn run_to_limit(
    state: &IterationState,
    family: &KernelFamily,
    tol: f64,
    max_passes: usize,
) -> Result<IterationState> {
    let mut cur = iterate_self_averaging(state, family, 1)?;
    for _ in 1..max_passes.min(MAX_PASSES) {
        if *cur.increments.last().expect("at least one pass ran") < tol {
            return Ok(cur);
        }
        cur = iterate_self_averaging(&cur, family, 1)?;
    }
    let tail = cur.increments.iter().rev().take(12).cloned().collect();
    Err(PhLabError::NonConvergence {
        context: format!("iteration increment still above {tol} after {max_passes} passes"),
        history: tail,
    })
}

/// Sup-norm defect of the iterate as a solution of its own equation.
pub fn fixed_point_residual(state: &IterationState, family: &KernelFamily) -> Result<f64> {
    let next = iterate_self_averaging(state, family, 1)?;
    let worst = state
        .iterate()
        .iter()
        .zip(next.iterate())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Renewal-theoretic solution on `[0, x_max]` for a stationary kernel
/// equal to the service density, plus the constant it settles at.
#[derive(Debug, Clone)]
pub struct RenewalReport {
    pub step: f64,
    /// `f` at `x = i h` for `i = 0..`.
    pub values: Vec<f64>,
    /// The closed-form limit: the mean of the one-step image of the
    /// boundary, divided by the step mean.
    pub limit: f64,
}

/// Solves the stationary equation directly: the one-step image
/// `g = [boundary * p]` plus its smoothing by the renewal density. An
/// independent route to the same function the iteration builds.
pub fn renewal_solution(
    boundary: &[f64],
    h: f64,
    d: &ServiceDistribution,
    x_max: f64,
) -> Result<RenewalReport> {
    if (h - d.grid_step()).abs() > 1e-12 {
        return Err(PhLabError::InvalidInput(format!(
            "solution grid {h} must match the service table step {}",
            d.grid_step()
        )));
    }
    let state = IterationState::new(boundary.to_vec(), h, x_max)?;
    let bins = (d.tail_cut() / h).ceil() as usize;
    let nodes = state.iterate().len();

    // One-step image of the boundary alone; vanishes once x clears the
    // boundary extent plus the service tail. The boundary is extended by
    // zero on x >= 0; the argument endpoint at zero itself reads the
    // left limit, matching the iteration's seam convention.
    let mut g = vec![0.0f64; nodes + bins];
    for (i, gi) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..bins {
            let m = (d.cdf((j + 1) as f64 * h) - d.cdf(j as f64 * h)).max(0.0);
            if m == 0.0 {
                continue;
            }
            // The state is un-iterated, so reading it is reading the
            // boundary extended by zero on x >= 0.
            let (i, j) = (i as isize, j as isize);
            acc += m * 0.5 * (state.upper_node(i - j) + state.node(i - j - 1));
        }
        *gi = acc;
    }

    let depth = (x_max / d.mean()).ceil() as usize * 2 + 60;
    let s = d.renewal_density(x_max, depth)?;
    let sv = s.values();
    let mut values = vec![0.0f64; nodes];
    for i in 0..nodes {
        let mut acc = g[i];
        // Trapezoid in the y variable of int g(y) s(x - y) dy; at x = 0
        // the interval is empty.
        for j in 0..=i.min(sv.len() - 1) {
            let w = if i == 0 {
                0.0
            } else if j == 0 || j == i {
                0.5
            } else {
                1.0
            };
            acc += w * h * g[i - j] * sv[j];
        }
        values[i] = acc;
    }

    let total: f64 = g
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == 0 || i == g.len() - 1 { 0.5 * v } else { v })
        .sum::<f64>()
        * h;
    Ok(RenewalReport { step: h, values, limit: total / d.mean() })
}

/// Outcome of the finite-range relaxation check.
#[derive(Debug, Clone, PartialEq)]
pub enum RelaxationVerdict {
    /// Oscillation over sliding windows dropped below the tolerance.
    Relaxed { at_x: f64, plateau: f64, final_osc: f64 },
    /// The iteration converged but the oscillation had not dropped below
    /// tolerance inside the probe range; says nothing against relaxation
    /// further out.
    Inconclusive { best_osc: f64 },
    /// A hypothesis of the finite-range criterion failed, so no verdict
    /// is offered.
    Withheld { reason: String },
}

/// Checks the finite-range relaxation criterion: compact kernel support,
/// a positive continuous floor under every density, and a cap. When the
/// hypotheses hold, runs the iteration to its limit and scans the
/// oscillation over sliding windows of width twice the support.
pub fn finite_range_check(
    state: &IterationState,
    family: &KernelFamily,
    x_budget: f64,
) -> Result<RelaxationVerdict> {
    let t = family.support_bound();
    if family.tail_slack > 0.0 {
        return Ok(RelaxationVerdict::Withheld {
            reason: format!("support is not compact: {} escapes the envelope", family.tail_slack),
        });
    }
    let Some(floor) = family.floor.as_ref() else {
        return Ok(RelaxationVerdict::Withheld { reason: "no positive floor declared".into() });
    };
    let h = state.h;
    let probes: Vec<f64> = (0..=20).map(|k| x_budget * k as f64 / 20.0).collect();
    let grid: Vec<f64> = (0..(t / h) as usize).map(|j| (j as f64 + 0.5) * h).collect();
    for &tt in &grid {
        let k = floor(tt);
        if !(k > 0.0) {
            return Ok(RelaxationVerdict::Withheld {
                reason: format!("floor vanishes at offset {tt}"),
            });
        }
        for &x in &probes {
            let q = family.density(x, tt);
            if q < k - 1e-12 {
                return Ok(RelaxationVerdict::Withheld {
                    reason: format!("density {q} at ({x}, {tt}) undercuts the floor {k}"),
                });
            }
            if q > family.cap() + 1e-12 {
                return Ok(RelaxationVerdict::Withheld {
                    reason: format!("density {q} at ({x}, {tt}) exceeds the cap"),
                });
            }
        }
    }
    family.check_mass(&probes)?;

    let limit = run_to_limit(state, family, ITERATION_TOL, MAX_PASSES)?;
    let f = limit.iterate();
    let wbins = ((2.0 * t / h).round() as usize).max(2);
    let stride = (wbins / 8).max(1);
    let mut best = f64::INFINITY;
    let mut at = None;
    let mut start = 0;
    while start + wbins <= f.len() {
        let w = &f[start..start + wbins];
        let osc = w.iter().cloned().fold(f64::MIN, f64::max)
            - w.iter().cloned().fold(f64::MAX, f64::min);
        best = best.min(osc);
        if osc < RELAX_OSC_TOL {
            at = Some(start as f64 * h);
            break;
        }
        start += stride;
    }
    Ok(match at {
        Some(x) => {
            let tail = &f[f.len() - wbins..];
            RelaxationVerdict::Relaxed {
                at_x: x,
                plateau: mean(tail),
                final_osc: tail.iter().cloned().fold(f64::MIN, f64::max)
                    - tail.iter().cloned().fold(f64::MAX, f64::min),
            }
        }
        None => RelaxationVerdict::Inconclusive { best_osc: best },
    })
}

/// Scan result for the "every width has near-extremal windows" property
/// of converged solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScan {
    pub tail_sup: f64,
    pub tail_inf: f64,
    /// Leftmost window whose infimum reaches the tail supremum minus the
    /// tolerance.
    pub high_window: Option<f64>,
    /// Leftmost window whose supremum stays within tolerance of the tail
    /// infimum.
    pub low_window: Option<f64>,
}

/// Scans windows of width `w` over `x >= from` for stretches pinned near
/// the asymptotic extremes.
pub fn extremal_windows(state: &IterationState, w: f64, from: f64, tol: f64) -> Result<WindowScan> {
    let h = state.h;
    let f = state.iterate();
    let lo = (from / h).round() as usize;
    let wbins = ((w / h).round() as usize).max(1);
    if lo + wbins >= f.len() {
        return Err(PhLabError::InvalidInput(format!(
            "window {w} from {from} does not fit the computed range"
        )));
    }
    let tail = &f[lo..];
    let tail_sup = tail.iter().cloned().fold(f64::MIN, f64::max);
    let tail_inf = tail.iter().cloned().fold(f64::MAX, f64::min);
    let mut high = None;
    let mut low = None;
    for start in lo..f.len() - wbins {
        let w = &f[start..start + wbins];
        let inf = w.iter().cloned().fold(f64::MAX, f64::min);
        let sup = w.iter().cloned().fold(f64::MIN, f64::max);
        if high.is_none() && inf >= tail_sup - tol {
            high = Some(start as f64 * h);
        }
        if low.is_none() && sup <= tail_inf + tol {
            low = Some(start as f64 * h);
        }
        if high.is_some() && low.is_some() {
            break;
        }
    }
    Ok(WindowScan { tail_sup, tail_inf, high_window: high, low_window: low })
}

/// Leftward walker driven by a kernel family: from `y` the next position
/// is `y - t` with `t ~ q_y`. The walk ends when it leaves the positive
/// axis: inside `[-depth, 0]` counts as a visit, below as an overshoot.
#[derive(Debug)]
pub struct WalkerSpec<'a> {
    pub family: &'a KernelFamily,
    pub start: f64,
    pub depth: f64,
    pub max_steps: usize,
}

/// Monte Carlo estimate of the visit probability, with the step-size
/// spread that exposes trapping families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorptionReport {
    pub replicas: usize,
    pub visits: usize,
    pub overshoots: usize,
    /// Replicas still positive when the step budget ran out.
    pub censored: usize,
    pub visit_probability: f64,
    /// 95% score interval for the visit probability.
    pub ci: (f64, f64),
    pub min_step: f64,
    pub max_step: f64,
    pub mean_step: f64,
}

/// Runs independent walker replicas in parallel substreams.
pub fn walker_and_absorption(
    spec: &WalkerSpec<'_>,
    replicas: usize,
    rng: &mut impl Rng,
) -> Result<AbsorptionReport> {
    if !(spec.start > 0.0) || !(spec.depth > 0.0) || spec.max_steps == 0 || replicas == 0 {
        return Err(PhLabError::InvalidInput(format!(
            "walker needs a positive start, depth, step budget and replicas; got start={}, depth={}, steps={}, replicas={replicas}",
            spec.start, spec.depth, spec.max_steps
        )));
    }
    let family = spec.family;
    if !(family.beta() > 1.0) || !family.moment_bound().is_finite() {
        return Err(PhLabError::Precondition(format!(
            "absorption estimates need a declared moment of order above 1, got ({}, {})",
            family.beta(),
            family.moment_bound()
        )));
    }
    let root: u64 = rng.gen();
    let acc = (0..WALKER_GROUPS)
        .into_par_iter()
        .map(|g| {
            let mut rng = streams::substream(root, &[g as u64]);
            let reps = replicas / WALKER_GROUPS + usize::from(g < replicas % WALKER_GROUPS);
            let mut visits = 0usize;
            let mut overshoots = 0usize;
            let mut censored = 0usize;
            let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, 0.0f64, 0.0f64, 0u64);
            for _ in 0..reps {
                let mut x = spec.start;
                let mut done = false;
                for _ in 0..spec.max_steps {
                    let t = family.sample_step(x, &mut rng);
                    if !(t > 0.0) || !t.is_finite() {
                        return Err(PhLabError::InvalidInput(format!(
                            "kernel at {x} produced a nonpositive step {t}"
                        )));
                    }
                    lo = lo.min(t);
                    hi = hi.max(t);
                    sum += t;
                    n += 1;
                    x -= t;
                    if x <= 0.0 {
                        if x >= -spec.depth {
                            visits += 1;
                        } else {
                            overshoots += 1;
                        }
                        done = true;
                        break;
                    }
                }
                if !done {
                    censored += 1;
                }
            }
            Ok((visits, overshoots, censored, lo, hi, sum, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let visits: usize = acc.iter().map(|a| a.0).sum();
    let overshoots: usize = acc.iter().map(|a| a.1).sum();
    let censored: usize = acc.iter().map(|a| a.2).sum();
    let min_step = acc.iter().map(|a| a.3).fold(f64::INFINITY, f64::min);
    let max_step = acc.iter().map(|a| a.4).fold(0.0, f64::max);
    let steps: u64 = acc.iter().map(|a| a.6).sum();
    let mean_step = acc.iter().map(|a| a.5).sum::<f64>() / steps.max(1) as f64;
    let ci = wilson_interval(visits as u64, replicas as u64, 1.96)?;
    Ok(AbsorptionReport {
        replicas,
        visits,
        overshoots,
        censored,
        visit_probability: visits as f64 / replicas as f64,
        ci,
        min_step,
        max_step,
        mean_step,
    })
}

/// The dyadic trapping family: above 1 the walker is thrown back into
/// `(0, 2]`; inside `(0, 1]` each step either halves the position toward
/// zero or fires the exponential escape beyond `depth + 1`, overshooting
/// the target interval entirely. The visit probability of
/// `[-depth, 0]` is exactly zero, at the price of a density cap that
/// grows without bound toward the origin, which is precisely the
/// hypothesis this family is built to break.
pub fn dyadic_trap(depth: f64) -> Result<KernelFamily> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(PhLabError::InvalidInput(format!("trap depth must be positive, got {depth}")));
    }
    let esc = (-(depth + 1.0)).exp();
    // Box geometry for an anchor in (0, 1]: the dyadic level and the
    // step interval that lands the walker on the next level down.
    let zone = move |x: f64| -> (f64, f64) {
        let k = (-x.log2()).floor() + 1.0;
        let lo = x - (-k).exp2();
        let hi = x - (-k - 1.0).exp2();
        (lo, hi)
    };
    let density = move |x: f64, t: f64| -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        if x > 1.0 {
            let k = x.ceil() - 1.0;
            return if (k - 1.0..=k).contains(&t) { 1.0 } else { 0.0 };
        }
        if x <= 0.0 {
            return if (0.0..=1.0).contains(&t) { 1.0 } else { 0.0 };
        }
        let (lo, hi) = zone(x);
        if t > depth + 1.0 {
            (-t).exp()
        } else if (lo..=hi).contains(&t) {
            (1.0 - esc) / (hi - lo)
        } else {
            0.0
        }
    };
    let mass = move |x: f64, a: f64, b: f64| -> f64 {
        if b <= a {
            return 0.0;
        }
        if x > 1.0 {
            let k = x.ceil() - 1.0;
            return (b.min(k) - a.max(k - 1.0)).max(0.0);
        }
        if x <= 0.0 {
            return (b.min(1.0) - a.max(0.0)).max(0.0);
        }
        let (lo, hi) = zone(x);
        let box_part = (b.min(hi) - a.max(lo)).max(0.0) / (hi - lo) * (1.0 - esc);
        let t0 = depth + 1.0;
        let tail_part = if b > t0 { (-a.max(t0)).exp() - (-b).exp() } else { 0.0 };
        box_part + tail_part
    };
    let sampler = move |x: f64, rng: &mut ChaCha8Rng| -> f64 {
        let u = rng.gen::<f64>();
        if x > 1.0 {
            let k = x.ceil() - 1.0;
            return k - 1.0 + u;
        }
        if x <= 0.0 {
            return u;
        }
        if u < esc {
            depth + 1.0 - (1.0 - u / esc).ln()
        } else {
            let (lo, hi) = zone(x);
            let v = (u - esc) / (1.0 - esc);
            lo + v * (hi - lo)
        }
    };
    Ok(KernelFamily {
        label: "dyadic-trap",
        density: Box::new(density),
        mass: Box::new(mass),
        sampler: Box::new(sampler),
        t_max: depth + 1.0 + 45.0,
        tail_slack: 1e-18,
        floor: None,
        beta: 2.0,
        moment_bound: 2.0 + (depth + 2.0).powi(2) * esc,
        cap: f64::INFINITY,
        stationary: false,
    })
}

/// The shift-structured counterexample families for the rightward
/// renewal walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterexampleKind {
    /// Steps `t = (1 - frac(x)) + u` with `u` uniform on `[0, 1)`: after
    /// `n` steps the position is trapped in one unit cell.
    FractionalShift,
    /// Steps `t = (2 - frac(x)) + u`: the integer part advances by two,
    /// splitting positions into two never-communicating parity classes.
    TwoClass,
}

impl CounterexampleKind {
    fn shift(self) -> f64 {
        match self {
            Self::FractionalShift => 1.0,
            Self::TwoClass => 2.0,
        }
    }
}

/// Builds the counterexample family over a unit-uniform base density.
pub fn counterexample_family(kind: CounterexampleKind) -> KernelFamily {
    let s = kind.shift();
    let start = move |x: f64| s - (x - x.floor());
    KernelFamily {
        label: match kind {
            CounterexampleKind::FractionalShift => "fractional-shift",
            CounterexampleKind::TwoClass => "two-class",
        },
        density: Box::new(move |x, t| {
            let lo = start(x);
            if (lo..lo + 1.0).contains(&t) {
                1.0
            } else {
                0.0
            }
        }),
        mass: Box::new(move |x, a, b| {
            let lo = start(x);
            (b.min(lo + 1.0) - a.max(lo)).max(0.0)
        }),
        sampler: Box::new(move |x, rng| start(x) + rng.gen::<f64>()),
        t_max: s + 1.0,
        tail_slack: 0.0,
        floor: None,
        beta: 2.0,
        moment_bound: (s + 1.0) * (s + 1.0),
        cap: 1.0,
        stationary: false,
    }
}

/// Exact trajectory audit of the shift families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationReport {
    pub steps: usize,
    /// Positions outside the predicted unit cell.
    pub violations: usize,
    /// Steps whose integer-offset parity was even / odd.
    pub parity_visits: (usize, usize),
    pub min_step: f64,
    pub max_step: f64,
}

/// Walks the rightward chain of a shift family and checks the predicted
/// localization cell at every step.
///
/// The walk is carried in split coordinates: an integer cell index plus a
/// fractional part in `[0, 1)`. One step maps `(k, frac)` to
/// `(k + shift, u)` exactly, because the step `shift - frac + u` lands on
/// `k + shift + u` by construction. Splitting removes the floating-point
/// drift a raw position accumulator would pick up over a million steps,
/// so a localization violation would be a genuine one.
pub fn verify_localization(
    kind: CounterexampleKind,
    start: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<LocalizationReport> {
    if !(start >= 0.0) || !start.is_finite() {
        return Err(PhLabError::InvalidInput(format!(
            "walker start must be nonnegative, got {start}"
        )));
    }
    let shift = kind.shift() as i64;
    let cell0 = start.floor() as i64;
    let mut cell = cell0;
    let mut frac = start - start.floor();
    let mut violations = 0usize;
    let mut parity = (0usize, 0usize);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for n in 1..=steps {
        let u = rng.gen::<f64>();
        let step = kind.shift() - frac + u;
        lo = lo.min(step);
        hi = hi.max(step);
        cell += shift;
        frac = u;
        // Predicted cell: integer part advances by exactly `shift` per
        // step, fractional part refreshes inside [0, 1).
        if cell != cell0 + shift * n as i64 || !(0.0..1.0).contains(&frac) {
            violations += 1;
        }
        if (cell - cell0) % 2 == 0 {
            parity.0 += 1;
        } else {
            parity.1 += 1;
        }
    }
    Ok(LocalizationReport { steps, violations, parity_visits: parity, min_step: lo, max_step: hi })
}

/// Exploratory statistics for the walker behind a kernel family: the
/// pointwise density ratio across anchors and the growth of the position
/// variance. Reported as observations only; nothing here is a proof
/// surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LltProbe {
    /// Whether every probed offset had all anchor densities positive
    /// together or zero together.
    pub ratio_comparable: bool,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub var_early: f64,
    pub var_late: f64,
    /// Variance roughly doubled when the step count did.
    pub linear_growth: bool,
}

/// Probes the anchor-uniformity of the family and the diffusive scaling
/// of its rightward walker.
pub fn llt_probe(
    family: &KernelFamily,
    start: f64,
    half_steps: usize,
    replicas: usize,
    rng: &mut impl Rng,
) -> Result<LltProbe> {
    if half_steps == 0 || replicas < 2 {
        return Err(PhLabError::InvalidInput(
            "variance probe needs steps and at least two replicas".into(),
        ));
    }
    let anchors: Vec<f64> = (0..25).map(|k| start + k as f64 * 0.37).collect();
    let h = family.support_bound() / 400.0;
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = 0.0f64;
    let mut comparable = true;
    for j in 0..400 {
        let t = (j as f64 + 0.5) * h;
        let vals: Vec<f64> = anchors.iter().map(|&x| family.density(x, t)).collect();
        let any = vals.iter().any(|&v| v > 0.0);
        let all = vals.iter().all(|&v| v > 0.0);
        if !any {
            continue;
        }
        if !all {
            comparable = false;
            continue;
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        ratio_min = ratio_min.min(lo / hi);
        ratio_max = ratio_max.max(hi / lo);
    }

    let root: u64 = rng.gen();
    let mut early = Vec::with_capacity(replicas);
    let mut late = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let mut rng = streams::substream(root, &[r as u64]);
        let mut x = start;
        for _ in 0..half_steps {
            x += family.sample_step(x, &mut rng);
        }
        early.push(x);
        for _ in 0..half_steps {
            x += family.sample_step(x, &mut rng);
        }
        late.push(x);
    }
    let (var_early, var_late) = (variance(&early), variance(&late));
    let ratio = var_late / var_early.max(1e-300);
    Ok(LltProbe {
        ratio_comparable: comparable,
        ratio_min,
        ratio_max,
        var_early,
        var_late,
        linear_growth: (1.5..=2.5).contains(&ratio),
    })
}

/// The segment a near-full measure grants at the left end: `[0, end]`
/// suffix-dominates the constant density `level`, with `margin` the
/// worst suffix slack and `bound` the guaranteed minimum length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalculReport {
    pub end: f64,
    pub level: f64,
    /// `min_s (chi([s, end]) - level (end - s))`, nonnegative by
    /// construction.
    pub margin: f64,
    /// The guaranteed lower bound on `end`.
    pub bound: f64,
}

/// Finds the longest initial segment `[0, C]` on which the measure with
/// density `chi` suffix-dominates the constant `1 - 2 eps`, given that
/// `chi` fills at least `(1 - eps)` of its whole span and stays below
/// `cap`.
///
/// With `G(s) = chi([0, s]) - (1 - 2 eps) s`, a segment `[0, d]` works
/// exactly when `G(d)` ties the running maximum of `G`, so one prefix
/// scan finds the answer.
pub fn calcul_segment(chi: &RateFunction, epsilon: f64, cap: f64) -> Result<CalculReport> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(PhLabError::InvalidInput(format!(
            "fill deficit must be in (0, 0.5), got {epsilon}"
        )));
    }
    let h = chi.step();
    let values = chi.values();
    let span = values.len() as f64 * h;
    if values.is_empty() {
        return Err(PhLabError::InvalidInput("empty density table".into()));
    }
    if let Some(&bad) = values.iter().find(|v| **v < 0.0 || **v > cap + 1e-12) {
        return Err(PhLabError::Precondition(format!(
            "density value {bad} outside [0, {cap}]"
        )));
    }
    let total: f64 = values.iter().sum::<f64>() * h;
    if total < (1.0 - epsilon) * span - 1e-9 {
        return Err(PhLabError::Precondition(format!(
            "measure {total} fills less than 1 - {epsilon} of the span {span}"
        )));
    }

    let level = 1.0 - 2.0 * epsilon;
    let slack = 1e-12 * span.max(1.0) * cap.max(1.0);
    let mut g = 0.0f64;
    let mut run_max = 0.0f64;
    let mut end_bin = 0usize;
    for (i, &v) in values.iter().enumerate() {
        g += (v - level) * h;
        if g >= run_max - slack {
            run_max = run_max.max(g);
            end_bin = i + 1;
        }
    }
    let end = end_bin as f64 * h;

    // Direct verification by suffix sums, the way a consumer would check.
    let mut suffix = 0.0f64;
    let mut margin = f64::INFINITY;
    for i in (0..end_bin).rev() {
        suffix += values[i] * h;
        margin = margin.min(suffix - level * (end_bin - i) as f64 * h);
    }
    let bound = epsilon / cap * span;
    if end <= bound {
        return Err(PhLabError::NonConvergence {
            context: format!("segment length {end} failed its guaranteed bound {bound}"),
            history: vec![end, bound],
        });
    }
    Ok(CalculReport { end, level, margin, bound })
}
