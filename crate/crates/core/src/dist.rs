//! Service-time distributions.
//!
//! The laboratory works in units where the mean service time is 1. A
//! distribution qualifies as "unit class" when its density is positive and
//! bounded on the working support, relatively Lipschitz, has a finite
//! (2+delta)-moment uniformly over elapsed-service conditioning, mean one, a
//! bounded hazard rate, and a hazard rate that settles to a limit in the deep
//! tail. [`ServiceDistribution::verify_class`] measures each of those
//! properties numerically and reports them; nothing else in the crate
//! enforces membership, so experiments on borderline inputs stay possible.
//!
//! Tabulated operations use a uniform grid of step [`ServiceDistribution::grid_step`]
//! (default 0.01) truncated where survival drops below 1e-8.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::Distribution as _;
use statrs::distribution::ContinuousCDF;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::PhLabError;
use crate::grid::{self, Tabulated};

pub const DEFAULT_GRID_STEP: f64 = 0.01;
pub const DEFAULT_MOMENT_DELTA: f64 = 0.5;
/// Survival level below which the working support is truncated.
const TAIL_SURVIVAL: f64 = 1e-8;
/// Unit-mean tolerance for the class flag.
const UNIT_MEAN_TOL: f64 = 1e-6;
/// Below this survival, hazards are reported as the recorded cap.
const SURVIVAL_FLOOR: f64 = 1e-300;
/// Node budget for convolution power tables.
const CONVOLUTION_NODE_BUDGET: usize = 4_000_000;

/// Weighted gamma component of a mixture; `shape = 1` gives an exponential.
#[derive(Debug, Clone, Copy)]
struct GammaAtom {
    weight: f64,
    shape: f64,
    rate: f64,
}

#[derive(Debug, Clone)]
enum Family {
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
    /// Lognormal conditioned on `t <= cut`; `norm` caches the base cdf at the cut.
    LognormalTruncated { mu: f64, sigma: f64, cut: f64, norm: f64 },
    Mixture { components: Vec<GammaAtom> },
    /// Linearly interpolated density with its cumulative at the nodes.
    TabulatedDensity { pdf: Tabulated, cum: Vec<f64> },
}

fn gamma_pdf(shape: f64, rate: f64, t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    if t == 0.0 {
        return match shape {
            s if s > 1.0 => 0.0,
            s if s == 1.0 => rate,
            _ => f64::INFINITY,
        };
    }
    (shape * rate.ln() + (shape - 1.0) * t.ln() - rate * t - ln_gamma(shape)).exp()
}

fn gamma_survival(shape: f64, rate: f64, t: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else {
        gamma_ur(shape, rate * t)
    }
}

/// Standard normal survival via erfc, stable deep in the tail.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

impl Family {
    fn pdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self {
            Family::Exponential { rate } => rate * (-rate * t).exp(),
            Family::Gamma { shape, rate } => gamma_pdf(*shape, *rate, t),
            Family::LognormalTruncated { mu, sigma, cut, norm } => {
                if t <= 0.0 || t > *cut {
                    0.0
                } else {
                    let z = (t.ln() - mu) / sigma;
                    (-0.5 * z * z).exp() / (t * sigma * (2.0 * std::f64::consts::PI).sqrt() * norm)
                }
            }
            Family::Mixture { components } => components
                .iter()
                .map(|c| c.weight * gamma_pdf(c.shape, c.rate, t))
                .sum(),
            Family::TabulatedDensity { pdf, .. } => pdf.eval(t),
        }
    }

    fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        match self {
            Family::Exponential { rate } => (-rate * t).exp(),
            Family::Gamma { shape, rate } => gamma_survival(*shape, *rate, t),
            Family::LognormalTruncated { mu, sigma, cut, norm } => {
                if t >= *cut {
                    0.0
                } else {
                    ((normal_sf((t.ln() - mu) / sigma) - normal_sf((cut.ln() - mu) / sigma)) / norm)
                        .clamp(0.0, 1.0)
                }
            }
            Family::Mixture { components } => components
                .iter()
                .map(|c| c.weight * gamma_survival(c.shape, c.rate, t))
                .sum(),
            Family::TabulatedDensity { pdf, cum } => {
                if t >= pdf.t_max() {
                    return 0.0;
                }
                let x = t / pdf.step();
                let k = x.floor() as usize;
                let w = x - k as f64;
                let c = cum[k] * (1.0 - w) + cum[(k + 1).min(cum.len() - 1)] * w;
                (cum[cum.len() - 1] - c).max(0.0) / cum[cum.len() - 1]
            }
        }
    }

    fn cdf(&self, t: f64) -> f64 {
        (1.0 - self.survival(t)).clamp(0.0, 1.0)
    }

    fn mean_exact(&self) -> Option<f64> {
        match self {
            Family::Exponential { rate } => Some(1.0 / rate),
            Family::Gamma { shape, rate } => Some(shape / rate),
            Family::LognormalTruncated { mu, sigma, cut, norm } => {
                let a = (cut.ln() - mu) / sigma;
                Some((mu + 0.5 * sigma * sigma).exp() * normal_cdf(a - sigma) / norm)
            }
            Family::Mixture { components } => {
                Some(components.iter().map(|c| c.weight * c.shape / c.rate).sum())
            }
            Family::TabulatedDensity { .. } => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Family::Exponential { .. } => "exponential",
            Family::Gamma { .. } => "gamma",
            Family::LognormalTruncated { .. } => "lognormal-truncated",
            Family::Mixture { .. } => "mixture",
            Family::TabulatedDensity { .. } => "tabulated-density",
        }
    }

    fn sample_one(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Family::Exponential { rate } => {
                rand_distr::Exp::new(*rate).expect("positive rate").sample(rng)
            }
            Family::Gamma { shape, rate } => {
                rand_distr::Gamma::new(*shape, 1.0 / rate).expect("valid gamma").sample(rng)
            }
            Family::LognormalTruncated { mu, sigma, cut, .. } => {
                let base = rand_distr::LogNormal::new(*mu, *sigma).expect("valid lognormal");
                loop {
                    let x = base.sample(rng);
                    if x <= *cut {
                        return x;
                    }
                }
            }
            Family::Mixture { components } => {
                let mut u: f64 = rng.gen();
                for c in components {
                    if u < c.weight {
                        return rand_distr::Gamma::new(c.shape, 1.0 / c.rate)
                            .expect("valid gamma")
                            .sample(rng);
                    }
                    u -= c.weight;
                }
                let last = components.last().expect("nonempty mixture");
                rand_distr::Gamma::new(last.shape, 1.0 / last.rate)
                    .expect("valid gamma")
                    .sample(rng)
            }
            Family::TabulatedDensity { pdf, cum } => {
                let total = cum[cum.len() - 1];
                let target = rng.gen::<f64>() * total;
                invert_cumulative(cum, pdf.step(), target)
            }
        }
    }
}

/// Inverts a piecewise-linear cumulative at `target` (clamped to range).
fn invert_cumulative(cum: &[f64], h: f64, target: f64) -> f64 {
    let target = target.clamp(0.0, cum[cum.len() - 1]);
    let k = cum.partition_point(|&c| c < target).max(1).min(cum.len() - 1);
    let (lo, hi) = (cum[k - 1], cum[k]);
    let w = if hi > lo { (target - lo) / (hi - lo) } else { 0.0 };
    ((k - 1) as f64 + w) * h
}

/// Pointwise density, distribution, and hazard values at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub pdf: f64,
    pub cdf: f64,
    pub hazard: f64,
}

/// One measured condition in a [`ClassReport`].
#[derive(Debug, Clone)]
pub struct ConditionCheck {
    pub pass: bool,
    pub measured: f64,
    pub note: String,
}

/// Numerical verification of the six unit-class conditions.
#[derive(Debug, Clone)]
pub struct ClassReport {
    /// Density positive on the open working support and bounded above.
    pub density_positive_bounded: ConditionCheck,
    /// Relative Lipschitz constant over forward steps up to 1.
    pub lipschitz: ConditionCheck,
    /// Largest conditional (2+delta)-moment over an elapsed-service grid.
    pub residual_moment: ConditionCheck,
    /// Mean equals one.
    pub unit_mean: ConditionCheck,
    /// Hazard bounded without a blow-up trend near the tail cut.
    pub hazard_bounded: ConditionCheck,
    /// Hazard settles to a finite limit in the deep tail.
    pub hazard_limit: ConditionCheck,
    pub moment_delta: f64,
    pub ph_class: bool,
}

impl ClassReport {
    pub fn checks(&self) -> [(&'static str, &ConditionCheck); 6] {
        [
            ("density positive and bounded", &self.density_positive_bounded),
            ("relative Lipschitz density", &self.lipschitz),
            ("uniform (2+delta)-moment", &self.residual_moment),
            ("unit mean", &self.unit_mean),
            ("hazard bounded", &self.hazard_bounded),
            ("hazard limit exists", &self.hazard_limit),
        ]
    }

    pub fn all_pass(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.pass)
    }
}

impl fmt::Display for ClassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class verification (delta = {}):", self.moment_delta)?;
        for (name, check) in self.checks() {
            writeln!(
                f,
                "  [{}] {:<32} measured {:>12.6e}  {}",
                if check.pass { "pass" } else { "FAIL" },
                name,
                check.measured,
                check.note
            )?;
        }
        writeln!(f, "  unit-class flag: {}", self.ph_class)
    }
}

/// Convolution powers `p, p*p, ..., p^{*n}` tabulated on a shared grid.
#[derive(Debug, Clone)]
pub struct ConvolutionTable {
    tables: Vec<Tabulated>,
}

impl ConvolutionTable {
    pub fn order_max(&self) -> usize {
        self.tables.len()
    }

    /// The `n`-fold convolution power, 1-based.
    pub fn power(&self, n: usize) -> Option<&Tabulated> {
        self.tables.get(n.checked_sub(1)?)
    }

    pub fn tables(&self) -> &[Tabulated] {
        &self.tables
    }
}

/// Renewal density on a uniform grid plus the certificate that the series
/// depth `n_certified` already accounts for everything but `series_tail_bound`
/// of mass on the window.
#[derive(Debug, Clone)]
pub struct RenewalDensity {
    step: f64,
    values: Vec<f64>,
    series_tail_bound: f64,
    n_certified: usize,
}

impl RenewalDensity {
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn series_tail_bound(&self) -> f64 {
        self.series_tail_bound
    }

    pub fn n_certified(&self) -> usize {
        self.n_certified
    }

    /// Linear interpolation; zero outside the window.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        if n == 0 || x < 0.0 || x > (n - 1) as f64 * self.step {
            return 0.0;
        }
        let pos = x / self.step;
        let k = (pos.floor() as usize).min(n - 1);
        if k + 1 == n {
            return self.values[k];
        }
        let w = pos - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

/// A service-time law together with the derived constants the rest of the
/// laboratory conditions on.
#[derive(Debug, Clone)]
pub struct ServiceDistribution {
    family: Family,
    grid_step: f64,
    tail_cut: f64,
    lipschitz_c: f64,
    moment_delta: f64,
    moment_bound: f64,
    hazard_cap: f64,
    mean: f64,
    ph_class: bool,
    pdf_grid: Tabulated,
}

impl ServiceDistribution {
    pub fn exponential(rate: f64) -> Result<Self, PhLabError> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(PhLabError::InvalidInput(format!("exponential rate must be positive, got {rate}")));
        }
        Self::build(Family::Exponential { rate }, DEFAULT_GRID_STEP, DEFAULT_MOMENT_DELTA)
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self, PhLabError> {
        if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
            return Err(PhLabError::InvalidInput(format!(
                "gamma needs positive shape and rate, got shape {shape}, rate {rate}"
            )));
        }
        Self::build(Family::Gamma { shape, rate }, DEFAULT_GRID_STEP, DEFAULT_MOMENT_DELTA)
    }

    pub fn lognormal_truncated(mu: f64, sigma: f64, cut: f64) -> Result<Self, PhLabError> {
        if !(sigma > 0.0 && cut > 0.0) || !mu.is_finite() {
            return Err(PhLabError::InvalidInput(format!(
                "lognormal-truncated needs sigma > 0 and cut > 0, got sigma {sigma}, cut {cut}"
            )));
        }
        let norm = normal_cdf((cut.ln() - mu) / sigma);
        if norm < 1e-6 {
            return Err(PhLabError::InvalidInput(format!(
                "truncation cut {cut} keeps only {norm:.2e} of the lognormal mass"
            )));
        }
        Self::build(
            Family::LognormalTruncated { mu, sigma, cut, norm },
            DEFAULT_GRID_STEP,
            DEFAULT_MOMENT_DELTA,
        )
    }

    /// Truncated lognormal with `mu` solved so the truncated mean is 1.
    pub fn lognormal_truncated_unit_mean(sigma: f64, cut: f64) -> Result<Self, PhLabError> {
        if !(sigma > 0.0 && cut > 1.0) {
            return Err(PhLabError::InvalidInput(format!(
                "unit-mean truncated lognormal needs sigma > 0 and cut > 1, got sigma {sigma}, cut {cut}"
            )));
        }
        let mean_at = |mu: f64| {
            let a = (cut.ln() - mu) / sigma;
            (mu + 0.5 * sigma * sigma).exp() * normal_cdf(a - sigma) / normal_cdf(a)
        };
        let mu = grid::bisect(|mu| mean_at(mu) - 1.0, -20.0, cut.ln(), 1e-13)?;
        Self::lognormal_truncated(mu, sigma, cut)
    }

    /// Mixture of gamma components given as `(weight, shape, rate)`; weights
    /// must sum to 1 within 1e-9. `shape = 1` components are exponentials.
    pub fn mixture(components: &[(f64, f64, f64)]) -> Result<Self, PhLabError> {
        if components.is_empty() {
            return Err(PhLabError::InvalidInput("mixture needs at least one component".into()));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PhLabError::InvalidInput(format!("mixture weights sum to {total}, expected 1")));
        }
        let mut atoms = Vec::with_capacity(components.len());
        for &(weight, shape, rate) in components {
            if !(weight > 0.0 && shape > 0.0 && rate > 0.0) {
                return Err(PhLabError::InvalidInput(format!(
                    "mixture component needs positive weight, shape, rate; got ({weight}, {shape}, {rate})"
                )));
            }
            atoms.push(GammaAtom { weight, shape, rate });
        }
        Self::build(Family::Mixture { components: atoms }, DEFAULT_GRID_STEP, DEFAULT_MOMENT_DELTA)
    }

    /// Density given as node values on a uniform grid; mass must be within
    /// 1e-3 of 1 and is renormalized exactly. The table's step becomes the
    /// working grid step.
    pub fn from_density_table(table: Tabulated) -> Result<Self, PhLabError> {
        if table.values().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(PhLabError::InvalidInput("tabulated density has negative or non-finite values".into()));
        }
        let mass = table.integral();
        if (mass - 1.0).abs() > 1e-3 {
            return Err(PhLabError::InvalidInput(format!(
                "tabulated density integrates to {mass}, expected 1 within 1e-3"
            )));
        }
        let mut pdf = table;
        pdf.map_in_place(|v| v / mass);
        let cum = pdf.cumulative();
        let step = pdf.step();
        Self::build(Family::TabulatedDensity { pdf, cum }, step, DEFAULT_MOMENT_DELTA)
    }

    /// Loads a two-column CSV `t, p(t)` on a uniform grid starting at 0.
    /// A non-numeric first line is treated as a header.
    pub fn from_density_csv(path: &Path) -> Result<Self, PhLabError> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (a, b) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(t), Ok(p)) => rows.push((t, p)),
                _ if i == 0 => continue, // header
                _ => {
                    return Err(PhLabError::Parse(format!(
                        "{}: line {} is not `t, p(t)`: {line:?}",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        if rows.len() < 2 {
            return Err(PhLabError::Parse(format!("{}: need at least two density rows", path.display())));
        }
        if rows[0].0.abs() > 1e-12 {
            return Err(PhLabError::Parse(format!("{}: grid must start at t = 0", path.display())));
        }
        let h = rows[1].0 - rows[0].0;
        if !(h > 0.0) {
            return Err(PhLabError::Parse(format!("{}: grid must be increasing", path.display())));
        }
        for (k, row) in rows.iter().enumerate() {
            if (row.0 - k as f64 * h).abs() > 1e-9 * (1.0 + row.0.abs()) {
                return Err(PhLabError::Parse(format!(
                    "{}: node {} at t = {} breaks the uniform step {h}",
                    path.display(),
                    k,
                    row.0
                )));
            }
        }
        Self::from_density_table(Tabulated::new(h, rows.into_iter().map(|r| r.1).collect())?)
    }

    /// Builds from the run-config naming: `family = <name>, params = <list>`.
    pub fn from_config(family: &str, params: &[f64]) -> Result<Self, PhLabError> {
        match family {
            "exponential" => match params {
                [rate] => Self::exponential(*rate),
                _ => Err(PhLabError::Parse("exponential takes params = rate".into())),
            },
            "gamma" => match params {
                [shape, rate] => Self::gamma(*shape, *rate),
                _ => Err(PhLabError::Parse("gamma takes params = shape, rate".into())),
            },
            "lognormal-truncated" => match params {
                [mu, sigma, cut] => Self::lognormal_truncated(*mu, *sigma, *cut),
                _ => Err(PhLabError::Parse("lognormal-truncated takes params = mu, sigma, cut".into())),
            },
            "mixture" => {
                if params.is_empty() || params.len() % 3 != 0 {
                    return Err(PhLabError::Parse(
                        "mixture takes params = weight, shape, rate triples".into(),
                    ));
                }
                let triples: Vec<(f64, f64, f64)> =
                    params.chunks(3).map(|c| (c[0], c[1], c[2])).collect();
                Self::mixture(&triples)
            }
            "tabulated-density" => Err(PhLabError::Parse(
                "tabulated-density is loaded from a CSV table, not inline params".into(),
            )),
            other => Err(PhLabError::Parse(format!("unknown distribution family {other:?}"))),
        }
    }

    /// Rebuilds with a different tabulation step.
    pub fn with_grid_step(self, grid_step: f64) -> Result<Self, PhLabError> {
        if !(grid_step > 0.0) || !grid_step.is_finite() {
            return Err(PhLabError::InvalidInput(format!("grid step must be positive, got {grid_step}")));
        }
        Self::build(self.family, grid_step, self.moment_delta)
    }

    /// Rebuilds with a different delta for the (2+delta)-moment constants.
    pub fn with_moment_delta(self, delta: f64) -> Result<Self, PhLabError> {
        if !(delta > 0.0) {
            return Err(PhLabError::InvalidInput(format!("moment delta must be positive, got {delta}")));
        }
        Self::build(self.family, self.grid_step, delta)
    }

    fn build(family: Family, grid_step: f64, moment_delta: f64) -> Result<Self, PhLabError> {
        let tail_raw = scan_survival_below(&family, TAIL_SURVIVAL)?;
        let tail_cut = (tail_raw / grid_step).ceil().max(1.0) * grid_step;
        let n_nodes = (tail_cut / grid_step).round() as usize + 1;
        let pdf_grid = Tabulated::from_fn(grid_step, n_nodes, |t| family.pdf(t))?;

        let deep = scan_survival_below(&family, 1e-15).unwrap_or(tail_cut);
        let mean = family.mean_exact().unwrap_or_else(|| {
            grid::integrate(&|t| t * family.pdf(t), 0.0, deep, 1e-10)
        });
        let p = 2.0 + moment_delta;
        let moment_bound = grid::integrate(&|t| t.powf(p) * family.pdf(t), 0.0, deep, 1e-10);

        let mut hazard_cap: f64 = 0.0;
        for k in 0..n_nodes {
            let t = k as f64 * grid_step;
            let s = family.survival(t);
            if s >= SURVIVAL_FLOOR && s > 0.0 {
                hazard_cap = hazard_cap.max(family.pdf(t) / s);
            }
        }

        let lipschitz_c = measure_lipschitz(&family, grid_step, tail_cut);
        let interior_positive =
            (1..n_nodes.saturating_sub(1)).all(|k| pdf_grid.values()[k] > 0.0);
        let ph_class =
            (mean - 1.0).abs() <= UNIT_MEAN_TOL && interior_positive && moment_bound.is_finite();

        Ok(Self {
            family,
            grid_step,
            tail_cut,
            lipschitz_c,
            moment_delta,
            moment_bound,
            hazard_cap,
            mean,
            ph_class,
            pdf_grid,
        })
    }

    pub fn family_name(&self) -> &'static str {
        self.family.name()
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    /// End of the working support: survival beyond it is below 1e-8.
    pub fn tail_cut(&self) -> f64 {
        self.tail_cut
    }

    pub fn lipschitz_c(&self) -> f64 {
        self.lipschitz_c
    }

    pub fn moment_delta(&self) -> f64 {
        self.moment_delta
    }

    /// Measured (2+delta)-moment of the service time.
    pub fn moment_bound(&self) -> f64 {
        self.moment_bound
    }

    /// Largest hazard value seen on the working grid.
    pub fn hazard_cap(&self) -> f64 {
        self.hazard_cap
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Whether the distribution qualifies for the unit class: mean one,
    /// positive density on the open support, finite moments.
    pub fn is_ph_class(&self) -> bool {
        self.ph_class
    }

    /// Density at `t`; zero for negative `t`.
    pub fn pdf(&self, t: f64) -> f64 {
        self.family.pdf(t)
    }

    /// Distribution function; zero for negative `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.family.cdf(t)
    }

    /// Survival `1 - F(t)`, computed stably in the tail.
    pub fn survival(&self, t: f64) -> f64 {
        self.family.survival(t)
    }

    /// Hazard rate `p(t) / (1 - F(t))`; once survival underflows below
    /// 1e-300 the recorded cap is reported instead.
    pub fn hazard(&self, t: f64) -> f64 {
        let s = self.family.survival(t);
        if s < SURVIVAL_FLOOR {
            self.hazard_cap
        } else {
            self.family.pdf(t) / s
        }
    }

    /// Density, distribution, and hazard at `t >= 0`.
    pub fn evaluate(&self, t: f64) -> Result<Eval, PhLabError> {
        if t < 0.0 || !t.is_finite() {
            return Err(PhLabError::InvalidInput(format!("evaluate needs t >= 0, got {t}")));
        }
        Ok(Eval { pdf: self.pdf(t), cdf: self.cdf(t), hazard: self.hazard(t) })
    }

    /// Mean remaining service given `tau` already elapsed, by adaptive
    /// quadrature of the survival function beyond `tau`.
    pub fn residual_mean(&self, tau: f64) -> Result<f64, PhLabError> {
        let s_tau = self.check_tail(tau, "residual_mean")?;
        let upper = self.relative_tail_end(tau, s_tau);
        Ok(grid::integrate(&|t| self.family.survival(t), tau, upper, 1e-11 * s_tau.max(1e-8)) / s_tau)
    }

    /// Remaining-service density given `tau` elapsed, tabulated on the grid.
    pub fn conditional_density(&self, tau: f64) -> Result<Tabulated, PhLabError> {
        let s_tau = self.check_tail(tau, "conditional_density")?;
        let upper = self.relative_tail_end(tau, s_tau);
        let n = (((upper - tau) / self.grid_step).ceil() as usize + 1).max(2);
        Tabulated::from_fn(self.grid_step, n, |t| self.family.pdf(tau + t) / s_tau)
    }

    /// Errors when `tau` is past the working support; otherwise survival there.
    fn check_tail(&self, tau: f64, op: &str) -> Result<f64, PhLabError> {
        if tau < 0.0 || !tau.is_finite() {
            return Err(PhLabError::InvalidInput(format!("{op} needs tau >= 0, got {tau}")));
        }
        if tau > self.tail_cut {
            return Err(PhLabError::TailExhausted(format!(
                "{op} at tau = {tau} is beyond the working support [0, {}]",
                self.tail_cut
            )));
        }
        let s = self.family.survival(tau);
        if s <= 0.0 {
            return Err(PhLabError::TailExhausted(format!("{op}: survival vanishes at tau = {tau}")));
        }
        Ok(s)
    }

    /// First point past `tau` where survival is negligible relative to
    /// survival at `tau`.
    fn relative_tail_end(&self, tau: f64, s_tau: f64) -> f64 {
        let target = s_tau * 1e-13;
        let mut step = self.tail_cut.max(1.0) * 0.25;
        let mut upper = tau + step;
        while self.family.survival(upper) > target && step < 1e9 {
            step *= 2.0;
            upper += step;
        }
        upper
    }

    /// `k` i.i.d. service times from the caller's stream.
    pub fn sample(&self, rng: &mut impl Rng, k: usize) -> Vec<f64> {
        (0..k).map(|_| self.family.sample_one(rng)).collect()
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> f64 {
        self.family.sample_one(rng)
    }

    /// Draws the remaining service given `tau` already elapsed.
    pub fn sample_residual(&self, rng: &mut impl Rng, tau: f64) -> Result<f64, PhLabError> {
        let s_tau = self.check_tail(tau, "sample_residual")?;
        if tau == 0.0 {
            return Ok(self.family.sample_one(rng));
        }
        match &self.family {
            Family::Exponential { .. } => Ok(self.family.sample_one(rng)),
            Family::Gamma { shape, rate } => {
                let g = statrs::distribution::Gamma::new(*shape, *rate).expect("valid gamma");
                let u: f64 = rng.gen();
                let target = (g.cdf(tau) + u * s_tau).clamp(0.0, 1.0 - 1e-16);
                Ok((g.inverse_cdf(target) - tau).max(0.0))
            }
            Family::LognormalTruncated { mu, sigma, cut, .. } => {
                let z_tau = normal_cdf((tau.ln() - mu) / sigma);
                let z_cut = normal_cdf((cut.ln() - mu) / sigma);
                let u: f64 = rng.gen();
                let target = (z_tau + u * (z_cut - z_tau)).clamp(1e-16, 1.0 - 1e-16);
                let n = statrs::distribution::Normal::standard();
                Ok(((mu + sigma * n.inverse_cdf(target)).exp() - tau).max(0.0))
            }
            Family::Mixture { .. } => loop {
                // Rejection: elapsed times in practice sit well inside the
                // bulk, so the acceptance rate stays moderate.
                let x = self.family.sample_one(rng);
                if x > tau {
                    return Ok(x - tau);
                }
            },
            Family::TabulatedDensity { pdf, cum } => {
                let total = cum[cum.len() - 1];
                let c_tau = total * (1.0 - self.family.survival(tau));
                let u: f64 = rng.gen();
                let target = c_tau + u * (total - c_tau);
                Ok((invert_cumulative(cum, pdf.step(), target) - tau).max(0.0))
            }
        }
    }

    /// The density tabulated on the working grid `[0, tail_cut]`.
    pub fn density_table(&self) -> &Tabulated {
        &self.pdf_grid
    }

    /// Convolution powers up to `n_max` on the full (growing) support.
    pub fn convolve_power(&self, n_max: usize) -> Result<ConvolutionTable, PhLabError> {
        self.convolve_power_impl(n_max, None)
    }

    /// Convolution powers truncated at `x_max`; cheaper when only a window
    /// of the support matters.
    pub fn convolve_power_truncated(
        &self,
        n_max: usize,
        x_max: f64,
    ) -> Result<ConvolutionTable, PhLabError> {
        if !(x_max > 0.0) {
            return Err(PhLabError::InvalidInput(format!("x_max must be positive, got {x_max}")));
        }
        let cap = (x_max / self.grid_step).ceil() as usize + 1;
        self.convolve_power_impl(n_max, Some(cap))
    }

    fn convolve_power_impl(
        &self,
        n_max: usize,
        cap: Option<usize>,
    ) -> Result<ConvolutionTable, PhLabError> {
        if n_max < 1 {
            return Err(PhLabError::InvalidInput("convolution order must be at least 1".into()));
        }
        let base_len = self.pdf_grid.len();
        let len_at = |n: usize| {
            let full = n * (base_len - 1) + 1;
            cap.map_or(full, |c| full.min(c))
        };
        let total: usize = (1..=n_max).map(len_at).sum();
        if total > CONVOLUTION_NODE_BUDGET {
            return Err(PhLabError::BudgetExceeded(format!(
                "{n_max} convolution powers need {total} nodes, budget is {CONVOLUTION_NODE_BUDGET}; truncate with x_max"
            )));
        }
        let mut tables = vec![self.pdf_grid.clone()];
        if let Some(c) = cap {
            if tables[0].len() > c {
                tables[0] = Tabulated::new(self.grid_step, tables[0].values()[..c].to_vec())?;
            }
        }
        for n in 2..=n_max {
            let next = tables
                .last()
                .expect("at least the first power")
                .convolve(&self.pdf_grid, Some(len_at(n)))?;
            tables.push(next);
        }
        Ok(ConvolutionTable { tables })
    }

    /// Renewal density (expected service completions per unit time of pure
    /// back-to-back service) on `[0, x_max]`, via the renewal integral
    /// equation on two grids combined by Richardson extrapolation.
    ///
    /// The solve itself includes all convolution orders; `n_max` is the
    /// certified series depth. The returned bound dominates the mass the
    /// first `n_max` orders miss on the window, and must come in below
    /// 1e-10, otherwise the request errors out as under-resolved.
    pub fn renewal_density(&self, x_max: f64, n_max: usize) -> Result<RenewalDensity, PhLabError> {
        if x_max < 0.0 || !x_max.is_finite() {
            return Err(PhLabError::InvalidInput(format!("x_max must be nonnegative, got {x_max}")));
        }
        if x_max == 0.0 {
            return Ok(RenewalDensity { step: self.grid_step, values: Vec::new(), series_tail_bound: 0.0, n_certified: n_max });
        }
        if n_max < 1 {
            return Err(PhLabError::InvalidInput("series depth must be at least 1".into()));
        }
        let bound = self.sum_below_bound(n_max, x_max);
        if !(bound < 1e-10) {
            return Err(PhLabError::Precondition(format!(
                "series depth {n_max} leaves a truncation bound {bound:.3e} on [0, {x_max}]; raise n_max"
            )));
        }
        let h = self.grid_step;
        let n_coarse = (x_max / h).ceil() as usize + 1;
        let coarse = volterra_renewal(h, &(0..n_coarse).map(|k| self.pdf(k as f64 * h)).collect::<Vec<_>>());
        let n_fine = 2 * (n_coarse - 1) + 1;
        let fine = volterra_renewal(
            0.5 * h,
            &(0..n_fine).map(|k| self.pdf(k as f64 * 0.5 * h)).collect::<Vec<_>>(),
        );
        let values: Vec<f64> = (0..n_coarse)
            .map(|k| grid::richardson(coarse[k], fine[2 * k], 2))
            .collect();
        Ok(RenewalDensity { step: h, values, series_tail_bound: bound, n_certified: n_max })
    }

    /// Chernoff bound on the chance that `n` services fit inside `[0, x]`.
    fn sum_below_bound(&self, n: usize, x: f64) -> f64 {
        let deep = scan_survival_below(&self.family, 1e-15).unwrap_or(self.tail_cut);
        let mut best: f64 = 1.0;
        for i in 0..60 {
            let theta = 1e-2 * 1.3f64.powi(i);
            let mgf = grid::integrate(&|t| (-theta * t).exp() * self.family.pdf(t), 0.0, deep, 1e-12);
            if mgf <= 0.0 {
                continue;
            }
            best = best.min((theta * x + n as f64 * mgf.ln()).exp());
        }
        best
    }

    /// Measures the six class conditions and reports them; never errors.
    pub fn verify_class(&self) -> ClassReport {
        let n = self.pdf_grid.len();
        let vals = self.pdf_grid.values();
        let interior: &[f64] = &vals[1..n.saturating_sub(1).max(1)];
        let min_interior = interior.iter().copied().fold(f64::INFINITY, f64::min);
        let sup_density = vals.iter().copied().fold(0.0f64, f64::max);
        let density_positive_bounded = ConditionCheck {
            pass: min_interior > 0.0 && sup_density.is_finite(),
            measured: min_interior,
            note: format!("sup density {sup_density:.4}"),
        };

        let lipschitz = ConditionCheck {
            pass: self.lipschitz_c.is_finite(),
            measured: self.lipschitz_c,
            note: "forward steps up to 1".into(),
        };

        // Uniform (2+delta)-moment over elapsed-service conditioning.
        let mut sup_moment: f64 = 0.0;
        let p = 2.0 + self.moment_delta;
        let taus = 32;
        for i in 0..=taus {
            let tau = self.tail_cut * i as f64 / taus as f64 * 0.98;
            let s = self.family.survival(tau);
            if s <= TAIL_SURVIVAL {
                break;
            }
            let upper = self.relative_tail_end(tau, s);
            let m = grid::integrate(&|t| (t - tau).powf(p) * self.family.pdf(t), tau, upper, 1e-10) / s;
            sup_moment = sup_moment.max(m);
        }
        let residual_moment = ConditionCheck {
            pass: sup_moment.is_finite(),
            measured: sup_moment,
            note: format!("sup over elapsed grid, delta = {}", self.moment_delta),
        };

        let unit_mean = ConditionCheck {
            pass: (self.mean - 1.0).abs() <= UNIT_MEAN_TOL,
            measured: self.mean,
            note: "unit class normalizes the mean to 1".into(),
        };

        // Bounded hazard: compare the overall sup with the sup away from the
        // tail end; a blow-up concentrated near the cut fails the condition.
        let early_nodes = ((n as f64) * 0.9) as usize;
        let hazard_at = |k: usize| {
            let t = k as f64 * self.grid_step;
            let s = self.family.survival(t);
            if s >= SURVIVAL_FLOOR && s > 0.0 {
                self.family.pdf(t) / s
            } else {
                0.0
            }
        };
        let sup_early = (0..early_nodes.max(1)).map(hazard_at).fold(0.0f64, f64::max);
        let hazard_bounded = ConditionCheck {
            pass: self.hazard_cap.is_finite() && self.hazard_cap <= 10.0 * sup_early.max(1e-6),
            measured: self.hazard_cap,
            note: format!("sup before the tail decade {sup_early:.4}"),
        };

        // Hazard limit: three nodes across the last tenth of the support,
        // accelerated by Aitken's delta-squared extrapolation.
        let t3 = self.tail_cut;
        let t2 = self.tail_cut * 0.95;
        let t1 = self.tail_cut * 0.90;
        let (h1, h2, h3) = (self.hazard(t1), self.hazard(t2), self.hazard(t3));
        let (d1, d2) = (h2 - h1, h3 - h2);
        let denom = d2 - d1;
        let limit = if d2.abs() < 1e-9 {
            h3
        } else if denom.abs() > 1e-12 {
            h3 - d2 * d2 / denom
        } else {
            f64::INFINITY
        };
        let hazard_limit = ConditionCheck {
            pass: limit.is_finite() && d2.abs() <= 1.2 * d1.abs() + 1e-9,
            measured: limit,
            note: format!("tail differences {d1:.3e}, {d2:.3e}"),
        };

        let ph_class = self.ph_class;
        ClassReport {
            density_positive_bounded,
            lipschitz,
            residual_moment,
            unit_mean,
            hazard_bounded,
            hazard_limit,
            moment_delta: self.moment_delta,
            ph_class,
        }
    }
}

impl fmt::Display for ServiceDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (mean {:.6}, grid {}, support [0, {:.2}])",
            self.family.name(),
            self.mean,
            self.grid_step,
            self.tail_cut
        )
    }
}

/// Smallest `t` (up to half a grid step) with `survival(t) < eps`.
fn scan_survival_below(family: &Family, eps: f64) -> Result<f64, PhLabError> {
    let mut hi = 1.0;
    while family.survival(hi) >= eps {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(PhLabError::InvalidInput(format!(
                "survival never drops below {eps} within t = 1e9; tail too heavy to tabulate"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if family.survival(mid) >= eps {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(hi)
}

/// Largest observed `|p(t+d) - p(t)| / (p(t) d)` over grid times and forward
/// steps `d` up to 1. Nodes with vanishing density are skipped.
fn measure_lipschitz(family: &Family, h: f64, tail_cut: f64) -> f64 {
    let deltas = [h, 10.0 * h, 0.1, 0.5, 1.0];
    let n = (tail_cut / h) as usize;
    let mut worst: f64 = 0.0;
    for k in 1..n {
        let t = k as f64 * h;
        let pt = family.pdf(t);
        if pt <= 0.0 {
            continue;
        }
        for &d in &deltas {
            if d > 1.0 {
                continue;
            }
            let ratio = (family.pdf(t + d) - pt).abs() / (pt * d);
            worst = worst.max(ratio);
        }
    }
    worst
}

/// Solves `s = p + p * s` on a uniform grid with the trapezoid rule.
fn volterra_renewal(h: f64, p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut s = vec![0.0; n];
    if n == 0 {
        return s;
    }
    s[0] = p[0];
    let denom = 1.0 - 0.5 * h * p[0];
    for k in 1..n {
        let mut acc = 0.5 * p[k] * s[0];
        for j in 1..k {
            acc += p[j] * s[k - j];
        }
        s[k] = (p[k] + h * acc) / denom;
    }
    s
}
