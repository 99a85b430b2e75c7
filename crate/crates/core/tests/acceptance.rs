//! Acceptance battery for the laboratory: exact combinatorial identities,
//! analytic oracles, and statistical property suites. Each criterion is
//! one test that prints a single summary line (run with `--nocapture` to
//! see them); every tolerance is a named constant below.

use std::time::{Duration, Instant};

use ph_lab_core::dist::ServiceDistribution;
use ph_lab_core::kernel;
use ph_lab_core::meanfield::{self, NetworkConfig, TaggedFlow};
use ph_lab_core::nmp::{self, FixedPointConfig};
use ph_lab_core::queue::{self, GridSpec, RateFunction};
use ph_lab_core::relax::{
    self, CounterexampleKind, IterationState, KernelFamily, RelaxationVerdict, WalkerSpec,
};
use ph_lab_core::rods::{self, CountMethod};
use ph_lab_core::stats;
use ph_lab_core::streams::substream;

/// Instances per rod size in the unanchored identity sweep.
const ROD_INSTANCES: usize = 1000;
/// Anchored instances satisfying / violating the span constraint.
const ANCHORED_SATISFYING: usize = 200;
const ANCHORED_VIOLATING: usize = 50;
/// Uniform band for the flat renewal density of memoryless services.
const RENEWAL_FLAT_TOL: f64 = 1e-6;
/// Band for the two-phase service renewal density at the far end.
const RENEWAL_LIMIT_TOL: f64 = 1e-2;
/// Half-load single-server oracle: idle mass and mean occupancy.
const IDLE_TOL: f64 = 1e-3;
const OCCUPANCY_TOL: f64 = 1e-2;
const OUTPUT_RATE_TOL: f64 = 1e-3;
/// Identity z-score cap and the fraction of (point, seed) pairs that must
/// respect it.
const IDENTITY_Z_CAP: f64 = 3.0;
const IDENTITY_PASS_FRACTION: f64 = 0.95;
const IDENTITY_SEEDS: u64 = 20;
const IDENTITY_SAMPLES: usize = 1_000_000;
/// Loaded-start decomposition run sizes and the leftover-weight cutoff.
const NOISY_SEEDS: u64 = 5;
const NOISY_SAMPLES: usize = 400_000;
const NOISY_EPS_CUTOFF: f64 = 0.01;
const NOISY_EPS_BY: f64 = 60.0;
/// Self-consistent-rate checks.
const PLATEAU_REPRODUCTION_TOL: f64 = 1e-4;
const PLATEAU_TOL: f64 = 1e-2;
const TERMINAL_OSC_TOL: f64 = 1e-3;
const CONSERVATION_TOL: f64 = 1e-3;
/// Network battery sizes and tolerances.
const NET_SIZE: usize = 2000;
const NET_HORIZON: f64 = 300.0;
const NET_BURN_IN: f64 = 100.0;
const NET_SEEDS: u64 = 20;
const NET_SWEEP_SEEDS: u64 = 40;
const NET_TAGGED: usize = 8;
const KS_LEVEL: f64 = 0.01;
const KS_PASS_MIN: usize = 18;
const PAIR_CORRELATION_CAP: f64 = 0.05;
const MARGINAL_TV_CAP: f64 = 0.05;
/// Coupled replica pairs and the required violation count.
const COUPLING_REPLICAS: usize = 10_000;
/// Relaxation-lab settings.
const RELAX_BUDGET_X: f64 = 100.0;
const LOCALIZATION_STEPS: usize = 1_000_000;
const TRAP_REPLICAS: usize = 2000;
const ABSORPTION_REPLICAS: usize = 20_000;
const ABSORPTION_FLOOR: f64 = 0.98;
/// Near-full density instances for the segment lemma.
const SEGMENT_INSTANCES: usize = 100;

fn exp_unit() -> ServiceDistribution {
    ServiceDistribution::exponential(1.0).expect("unit rate is valid")
}

fn ok<T, E: std::fmt::Display>(step: &str, r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("{step}: {e}"))
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

/// Prints the one-line verdict and enforces the runtime budget; panics on
/// failure so the criterion shows up red in the test summary too.
fn conclude(
    index: usize,
    name: &str,
    budget: Option<Duration>,
    started: Instant,
    outcome: Result<String, String>,
) {
    let elapsed = started.elapsed();
    let outcome = outcome.and_then(|detail| match budget {
        Some(b) if elapsed > b => {
            Err(format!("runtime {elapsed:.1?} exceeded the {b:?} budget ({detail})"))
        }
        _ => Ok(detail),
    });
    match outcome {
        Ok(detail) => println!("[PASS] {index:02} {name} ({elapsed:.1?}): {detail}"),
        Err(why) => {
            println!("[FAIL] {index:02} {name} ({elapsed:.1?}): {why}");
            panic!("criterion {index:02} ({name}) failed: {why}");
        }
    }
}

#[test]
fn criterion_01_rod_hit_totals_are_exactly_factorial() {
    let started = Instant::now();
    let outcome = (|| {
        for n in 2..=6usize {
            let mut rng = substream(4801, &[n as u64]);
            let fact = rods::factorial(n);
            for k in 0..ROD_INSTANCES {
                let (points, lengths) = rods::random_instance(&mut rng, n);
                let f = ok(
                    "closed-form count",
                    rods::total_counts_with(&points, &lengths, None, CountMethod::Formula),
                )?;
                let b = ok(
                    "bruteforce count",
                    rods::total_counts_with(&points, &lengths, None, CountMethod::Bruteforce),
                )?;
                ensure(
                    f.total == fact,
                    format!("n = {n}, instance {k}: total {} instead of {fact}", f.total),
                )?;
                for (pf, pb) in f.per_permutation.iter().zip(&b.per_permutation) {
                    ensure(
                        pf == pb,
                        format!("n = {n}, instance {k}: methods disagree on {:?}", pf.0),
                    )?;
                }
            }
        }
        // The two-rod worked example: one assignment catches the fixed
        // right end twice, the swapped one is blocked entirely.
        let ex = ok("two-rod example", rods::total_counts(&[-3.0], &[1.0, 10.0], None))?;
        let mut counts: Vec<u64> = ex.per_permutation.iter().map(|p| p.1).collect();
        counts.sort_unstable();
        ensure(
            ex.total == 2 && counts == [0, 2],
            format!("two-rod example gave {counts:?} (total {})", ex.total),
        )?;
        Ok(format!(
            "{} instances per n in 2..=6, totals n! exactly, methods agree per permutation",
            ROD_INSTANCES
        ))
    })();
    conclude(1, "rod hit totals", Some(Duration::from_secs(60)), started, outcome);
}

#[test]
fn criterion_02_anchored_totals_and_their_breaking_point() {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = substream(4802, &[1]);
        let sizes = [2usize, 3, 4, 5];
        for k in 0..ANCHORED_SATISFYING {
            let n = sizes[k % sizes.len()];
            let (points, lengths, (t, l)) = rods::random_anchored_instance(&mut rng, n, true);
            let rep = ok(
                "anchored count",
                rods::total_counts_with(&points, &lengths, Some((t, l)), CountMethod::Formula),
            )?;
            ensure(rep.constraint_ok, format!("instance {k} unexpectedly violates the span"))?;
            ensure(
                rep.total == rods::factorial(n),
                format!("satisfying instance {k} (n = {n}) gave {}", rep.total),
            )?;
        }

        // With the span constraint broken the total may differ; at least
        // one audited instance has to show it.
        let mut mismatches = Vec::new();
        let mut audited = 0usize;
        let mut attempts = 0usize;
        while audited < ANCHORED_VIOLATING && attempts < 20 * ANCHORED_VIOLATING {
            attempts += 1;
            let n = sizes[audited % sizes.len()];
            let (points, lengths, (t, l)) = rods::random_anchored_instance(&mut rng, n, false);
            let Ok(rep) =
                rods::total_counts_with(&points, &lengths, Some((t, l)), CountMethod::Formula)
            else {
                continue;
            };
            ensure(!rep.constraint_ok, format!("violating instance {audited} satisfies the span"))?;
            audited += 1;
            if rep.total != rods::factorial(n) {
                mismatches.push((points, lengths, (t, l), n, rep.total));
            }
        }
        ensure(audited == ANCHORED_VIOLATING, format!("only {audited} violating instances audited"))?;
        ensure(
            !mismatches.is_empty(),
            "no span-violating instance moved the total off n!".into(),
        )?;
        let (points, lengths, anchor, n, total) = &mismatches[0];
        let archive = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("anchored_mismatch.txt");
        ok(
            "archive",
            std::fs::write(
                &archive,
                format!(
                    "n = {n}\npoints = {points:?}\nlengths = {lengths:?}\nanchor (t, l) = {anchor:?}\ntotal = {total} (n! = {})\n",
                    rods::factorial(*n)
                ),
            ),
        )?;
        Ok(format!(
            "{ANCHORED_SATISFYING} satisfying instances hit n!, {} of {ANCHORED_VIOLATING} violating ones moved off it (first archived at {})",
            mismatches.len(),
            archive.display()
        ))
    })();
    conclude(2, "anchored totals", None, started, outcome);
}

#[test]
fn criterion_03_renewal_density_flattens_to_one_over_mean() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        let s = ok("memoryless renewal table", d.renewal_density(40.0, 170))?;
        let h = s.step();
        let mut worst = 0.0f64;
        for (i, &v) in s.values().iter().enumerate() {
            let x = i as f64 * h;
            if x >= 0.5 {
                worst = worst.max((v - 1.0).abs());
            }
        }
        ensure(
            worst < RENEWAL_FLAT_TOL,
            format!("memoryless renewal density off flat by {worst:.2e}"),
        )?;

        let d2 = ok("two-phase service", ServiceDistribution::gamma(2.0, 2.0))?;
        let s2 = ok("two-phase renewal table", d2.renewal_density(40.0, 170))?;
        let idx = ((40.0 / s2.step()).round() as usize).min(s2.values().len() - 1);
        let far = s2.values()[idx];
        ensure(
            (far - 1.0).abs() < RENEWAL_LIMIT_TOL,
            format!("two-phase renewal density is {far} at the far end"),
        )?;
        Ok(format!(
            "flat within {worst:.1e} for memoryless services; two-phase value {far:.4} at x = 40"
        ))
    })();
    conclude(3, "renewal density limits", None, started, outcome);
}

#[test]
fn criterion_04_half_load_station_matches_the_birth_death_oracle() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        let grid = GridSpec::default();
        let nu = ok("stationary law", queue::stationary_state(0.5, &d, &grid))?;
        let obs = ok("observables", queue::observables(&nu, &d))?;
        ensure(
            (nu.idle_mass() - 0.5).abs() <= IDLE_TOL,
            format!("idle mass {}", nu.idle_mass()),
        )?;
        ensure((obs.n_mean - 1.0).abs() <= OCCUPANCY_TOL, format!("mean occupancy {}", obs.n_mean))?;

        let lam = RateFunction::constant(0.5);
        let traj = ok("forward run", queue::evolve_master(&grid.idle_state(&d), &lam, &d, 120.0))?;
        let tail = &traj.b[traj.b.len() - 1000..];
        let tail_mean = stats::mean(tail);
        let last = *traj.b.last().expect("nonempty run");
        ensure(
            (tail_mean - 0.5).abs() <= OUTPUT_RATE_TOL && (last - 0.5).abs() <= OUTPUT_RATE_TOL,
            format!("output rate settled at {tail_mean} (final {last})"),
        )?;
        Ok(format!(
            "idle {:.4}, mean occupancy {:.4}, output rate from empty settles at {:.5}",
            nu.idle_mass(),
            obs.n_mean,
            tail_mean
        ))
    })();
    conclude(4, "half-load station oracle", None, started, outcome);
}

#[test]
fn criterion_05_departure_rate_is_the_kernel_convolution() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        let lam = ok(
            "rate table",
            RateFunction::from_fn(0.01, 85.0, |t| 0.5 * (1.0 + 0.8 * t.sin())),
        )?;
        let xs = [20.0, 40.0, 80.0];
        let mut pairs = 0usize;
        let mut within = 0usize;
        let mut worst_z = 0.0f64;
        let mut worst_mass_excess = f64::MIN;
        for seed in 0..IDENTITY_SEEDS {
            let mut rng = substream(4805, &[seed]);
            let rep = ok(
                "identity run",
                kernel::verify_self_averaging(&lam, &d, &xs, IDENTITY_SAMPLES, &mut rng),
            )?;
            for p in &rep.points {
                pairs += 1;
                if p.z.abs() <= IDENTITY_Z_CAP {
                    within += 1;
                }
                worst_z = worst_z.max(p.z.abs());
                let excess = p.kernel_mass - (1.0 + 3.0 * p.kernel_mass_std_error);
                worst_mass_excess = worst_mass_excess.max(excess);
                ensure(
                    excess <= 0.0,
                    format!(
                        "seed {seed}, x = {}: kernel mass {} exceeds 1 by more than 3 se",
                        p.x, p.kernel_mass
                    ),
                )?;
            }
        }
        let needed = (IDENTITY_PASS_FRACTION * pairs as f64).ceil() as usize;
        ensure(
            within >= needed,
            format!("{within}/{pairs} pairs inside {IDENTITY_Z_CAP} se, need {needed}"),
        )?;
        Ok(format!(
            "{within}/{pairs} (point, seed) pairs within {IDENTITY_Z_CAP} se (worst |z| {worst_z:.2}), mass never above 1 + 3 se (worst margin {worst_mass_excess:.1e})"
        ))
    })();
    conclude(5, "output as kernel convolution", Some(Duration::from_secs(600)), started, outcome);
}

#[test]
fn criterion_06_loaded_start_decomposition_fades() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        let grid = GridSpec::default();
        let mu = ok("three-customer start", grid.busy_state(&d, 3, 0.0))?;
        let lam = ok(
            "rate table",
            RateFunction::from_fn(0.01, 85.0, |t| 0.5 * (1.0 + 0.8 * t.sin())),
        )?;
        let xs = [20.0, 40.0, 60.0, 80.0];
        let mut pairs = 0usize;
        let mut within = 0usize;
        for seed in 0..NOISY_SEEDS {
            let mut rng = substream(4806, &[seed]);
            let rep =
                ok("decomposition run", kernel::verify_noisy(&mu, &lam, &d, &xs, NOISY_SAMPLES, &mut rng))?;
            for p in &rep.points {
                pairs += 1;
                if p.z.abs() <= IDENTITY_Z_CAP {
                    within += 1;
                }
            }
        }
        let needed = (IDENTITY_PASS_FRACTION * pairs as f64).ceil() as usize;
        ensure(
            within >= needed,
            format!("{within}/{pairs} pairs inside {IDENTITY_Z_CAP} se, need {needed}"),
        )?;

        let eps_grid: Vec<f64> = (1..=8).map(|k| 10.0 * k as f64).collect();
        let mut rng = substream(4806, &[NOISY_SEEDS]);
        let table =
            ok("leftover weight", kernel::epsilon_noise(&mu, &lam, &d, &eps_grid, NOISY_SAMPLES, &mut rng))?;
        for w in table.eps.windows(2) {
            ensure(w[1] <= w[0], format!("leftover weight rose: {:?}", table.eps))?;
        }
        let at = eps_grid.iter().position(|&x| x == NOISY_EPS_BY).expect("grid holds 60");
        ensure(
            table.eps[at] < NOISY_EPS_CUTOFF,
            format!("leftover weight {} at x = {NOISY_EPS_BY}", table.eps[at]),
        )?;
        Ok(format!(
            "{within}/{pairs} pairs within {IDENTITY_Z_CAP} se; leftover weight nonincreasing, {:.5} at x = {NOISY_EPS_BY}",
            table.eps[at]
        ))
    })();
    conclude(6, "loaded-start decomposition", None, started, outcome);
}

#[test]
fn criterion_07_self_consistent_rate_holds_and_relaxes() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        // From the matching stationary law the constant rate reproduces
        // itself.
        let cfg_a = FixedPointConfig { horizon: 60.0, ..FixedPointConfig::default() };
        let grid = GridSpec { h: cfg_a.step, n_max: queue::DEFAULT_N_MAX };
        let nu = ok("stationary law", queue::stationary_state(0.5, &d, &grid))?;
        let sol = ok("fixed point from stationary start", nmp::solve_fixed_point(&nu, &d, &cfg_a))?;
        let worst = sol
            .lam
            .values()
            .iter()
            .map(|v| (v - 0.5).abs())
            .fold(0.0, f64::max);
        ensure(
            worst <= PLATEAU_REPRODUCTION_TOL,
            format!("stationary start drifted {worst:.2e} off its constant rate"),
        )?;

        // A one-customer start must settle onto the same plateau.
        let cfg_b =
            FixedPointConfig { damping: 1.0, horizon: 210.0, ..FixedPointConfig::default() };
        let nu1 = ok(
            "one-customer start",
            GridSpec { h: cfg_b.step, n_max: queue::DEFAULT_N_MAX }.busy_state(&d, 1, 0.0),
        )?;
        let sol = ok("fixed point from one customer", nmp::solve_fixed_point(&nu1, &d, &cfg_b))?;
        let relax_report = ok("window diagnostic", nmp::relaxation_diagnostic(&sol, 10.0))?;
        ensure(
            (relax_report.plateau - 0.5).abs() <= PLATEAU_TOL,
            format!("plateau {}", relax_report.plateau),
        )?;
        let last_start = *relax_report.times.last().expect("windows exist");
        let last_osc = *relax_report.osc.last().expect("windows exist");
        ensure(
            (last_start - 200.0).abs() < 1e-9 && last_osc < TERMINAL_OSC_TOL,
            format!("window at {last_start} still oscillates by {last_osc:.2e}"),
        )?;
        let cons = nmp::conservation_check(&sol);
        ensure(
            cons.drift <= CONSERVATION_TOL,
            format!("mean occupancy drifted by {}", cons.drift),
        )?;
        Ok(format!(
            "stationary start flat within {worst:.1e}; perturbed plateau {:.4}, terminal spread {last_osc:.1e}, occupancy drift {:.1e}",
            relax_report.plateau, cons.drift
        ))
    })();
    conclude(7, "self-consistent rate", Some(Duration::from_secs(300)), started, outcome);
}

/// One network run reduced to the battery's ingredients.
fn network_flows(
    m: usize,
    seed: u64,
    d: &ServiceDistribution,
) -> Result<(Vec<TaggedFlow>, Vec<meanfield::Checkpoint>), String> {
    let mut rng = substream(4808, &[m as u64, seed]);
    let cfg = NetworkConfig::new(m, m, NET_HORIZON);
    let run = ok("network run", meanfield::simulate_network(&cfg, d, &mut rng))?;
    let flows: Vec<TaggedFlow> =
        (0..NET_TAGGED.min(m)).map(|s| meanfield::extract_flow(&run.log, s)).collect();
    Ok((flows, run.checkpoints))
}

#[test]
fn criterion_08_large_network_flows_pass_the_poisson_battery() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        let mut ks_pass = 0usize;
        let mut rejections_big = 0usize;
        let mut correlations = Vec::new();
        let mut pooled = Vec::new();
        for seed in 0..NET_SEEDS {
            let (flows, checkpoints) = network_flows(NET_SIZE, seed, &d)?;
            let chaos = ok("flow tests", meanfield::pooled_flow_tests(&flows, NET_BURN_IN))?;
            let f = chaos.flow.expect("flow stats present");
            if f.ks_p_value > KS_LEVEL {
                ks_pass += 1;
            } else {
                rejections_big += 1;
            }
            let mut rng = substream(4809, &[seed]);
            let pair =
                ok("pair correlation", meanfield::mean_pair_correlation(&checkpoints, NET_BURN_IN, &mut rng))?;
            correlations.push(pair.correlation);
            pooled.extend(checkpoints);
        }
        ensure(
            ks_pass >= KS_PASS_MIN,
            format!("only {ks_pass}/{NET_SEEDS} seeds kept p > {KS_LEVEL}"),
        )?;
        let rho = stats::mean(&correlations);
        ensure(
            rho.abs() < PAIR_CORRELATION_CAP,
            format!("pair correlation {rho:.4} across seeds"),
        )?;
        let gap = ok("marginal distance", meanfield::compare_to_fixed_point(&pooled, &d, NET_BURN_IN))?;
        ensure(gap.tv < MARGINAL_TV_CAP, format!("marginal distance {:.4}", gap.tv))?;

        // Rejection rates along growing network sizes, nonincreasing up
        // to two pooled binomial standard errors of slack.
        let mut rates: Vec<(usize, f64, usize, usize)> = Vec::new();
        for m in [10usize, 100, 1000] {
            let mut rejected = 0usize;
            for seed in 0..NET_SWEEP_SEEDS {
                let (flows, _) = network_flows(m, seed, &d)?;
                let chaos = ok("flow tests", meanfield::pooled_flow_tests(&flows, NET_BURN_IN))?;
                if chaos.flow.expect("flow stats present").ks_p_value <= KS_LEVEL {
                    rejected += 1;
                }
            }
            rates.push((m, rejected as f64 / NET_SWEEP_SEEDS as f64, rejected, NET_SWEEP_SEEDS as usize));
        }
        rates.push((
            NET_SIZE,
            rejections_big as f64 / NET_SEEDS as f64,
            rejections_big,
            NET_SEEDS as usize,
        ));
        for pair in rates.windows(2) {
            let ((m0, r0, k0, n0), (m1, r1, k1, n1)) = (pair[0], pair[1]);
            let p = (k0 + k1) as f64 / (n0 + n1) as f64;
            let slack = 2.0 * (p * (1.0 - p) * (1.0 / n0 as f64 + 1.0 / n1 as f64)).sqrt();
            ensure(
                r1 <= r0 + slack,
                format!("rejection rate rose from {r0:.3} (M = {m0}) to {r1:.3} (M = {m1}), slack {slack:.3}"),
            )?;
        }
        let shown: Vec<String> =
            rates.iter().map(|(m, r, ..)| format!("M = {m}: {r:.3}")).collect();
        Ok(format!(
            "{ks_pass}/{NET_SEEDS} seeds pass KS, pair correlation {rho:.4}, marginal distance {:.4}, rejections [{}]",
            gap.tv,
            shown.join(", ")
        ))
    })();
    conclude(8, "large-network flow battery", Some(Duration::from_secs(900)), started, outcome);
}

#[test]
fn criterion_09_ordered_inputs_never_cross_under_the_coupling() {
    let started = Instant::now();
    let outcome = (|| {
        let d = exp_unit();
        let horizon = 50.0;
        let flat = |r: f64| RateFunction::from_fn(0.05, horizon, move |_| r);
        let front = ok(
            "front-loaded rate",
            RateFunction::from_fn(0.05, horizon, |t| if t < 25.0 { 0.55 } else { 0.2 }),
        )?;
        let late = ok(
            "late-burst rate",
            RateFunction::from_fn(0.05, horizon, |t| if t < 25.0 { 0.2 } else { 0.55 }),
        )?;
        let scenarios = [
            (ok("low rate", flat(0.3))?, ok("high rate", flat(0.5))?, 4000usize),
            (ok("equal rate", flat(0.4))?, ok("equal rate", flat(0.4))?, 3000),
            (front, late, 3000),
        ];
        let mut rng = substream(4810, &[9]);
        let mut replicas = 0usize;
        let mut violations = 0usize;
        for (lo, hi, reps) in &scenarios {
            let report =
                ok("coupled run", queue::order_and_couple(lo, hi, &d, horizon, *reps, &mut rng))?;
            replicas += report.replicas;
            violations += report.violations;
        }
        ensure(replicas == COUPLING_REPLICAS, format!("ran {replicas} replica pairs"))?;
        ensure(violations == 0, format!("{violations} ordered pairs crossed"))?;
        Ok(format!("{replicas} coupled replica pairs across 3 scenarios, zero crossings"))
    })();
    conclude(9, "monotone input coupling", None, started, outcome);
}

#[test]
fn criterion_10_relaxation_lab_verdicts() {
    let started = Instant::now();
    let outcome = (|| {
        // Compact floored families must flatten inside the probe budget,
        // starting from boundary data that actually oscillates.
        let h = relax::LAB_STEP;
        let boundary: Vec<f64> =
            (0..=100).map(|j| 0.5 + 0.4 * (6.0 * (j as f64 - 100.0) * h).sin()).collect();
        let mut relaxed_at = Vec::new();
        for family in [KernelFamily::uniform_step(), KernelFamily::blended_step()] {
            let state = ok(
                "boundary data",
                IterationState::new(boundary.clone(), h, RELAX_BUDGET_X),
            )?;
            match ok("relaxation check", relax::finite_range_check(&state, &family, RELAX_BUDGET_X))? {
                RelaxationVerdict::Relaxed { at_x, .. } => {
                    ensure(
                        at_x <= RELAX_BUDGET_X,
                        format!("{} relaxed only at {at_x}", family.label()),
                    )?;
                    relaxed_at.push(format!("{} at x = {at_x:.1}", family.label()));
                }
                v => return Err(format!("{} did not relax: {v:?}", family.label())),
            }
        }

        // Shift counterexamples stay in their predicted cells, exactly.
        let mut rng = substream(4810, &[10]);
        for kind in [CounterexampleKind::FractionalShift, CounterexampleKind::TwoClass] {
            let loc = ok(
                "localization walk",
                relax::verify_localization(kind, 0.37, LOCALIZATION_STEPS, &mut rng),
            )?;
            ensure(
                loc.violations == 0,
                format!("{kind:?}: {} cell violations over {LOCALIZATION_STEPS} steps", loc.violations),
            )?;
            if kind == CounterexampleKind::TwoClass {
                ensure(
                    loc.parity_visits.1 == 0,
                    format!("{kind:?} reached the forbidden parity class"),
                )?;
            }
        }

        // The trapping family never lets the walker into the target band.
        let trap = ok("trap family", relax::dyadic_trap(3.0))?;
        let spec = WalkerSpec { family: &trap, start: 0.8, depth: 3.0, max_steps: 100_000 };
        let report = ok("trap walk", relax::walker_and_absorption(&spec, TRAP_REPLICAS, &mut rng))?;
        ensure(
            report.visits == 0,
            format!("trapped walker visited the band {} times", report.visits),
        )?;

        // Heavy-step absorption improves with depth and clears the floor.
        let heavy = ok("heavy-step family", KernelFamily::pareto_steps(2.5))?;
        let mut probs = Vec::new();
        for depth in [10.0, 50.0, 200.0] {
            let spec = WalkerSpec { family: &heavy, start: 30.0, depth, max_steps: 100_000 };
            let rep =
                ok("absorption run", relax::walker_and_absorption(&spec, ABSORPTION_REPLICAS, &mut rng))?;
            probs.push(rep.visit_probability);
        }
        for w in probs.windows(2) {
            ensure(w[1] > w[0], format!("absorption fell along depths: {probs:?}"))?;
        }
        ensure(
            *probs.last().expect("three depths") > ABSORPTION_FLOOR,
            format!("deep absorption only {probs:?}"),
        )?;
        Ok(format!(
            "relaxed: {}; localization exact over {LOCALIZATION_STEPS} steps; trap visit probability 0/{TRAP_REPLICAS}; absorption {probs:?}",
            relaxed_at.join(", ")
        ))
    })();
    conclude(10, "relaxation laboratory", None, started, outcome);
}

#[test]
fn criterion_11_near_full_densities_grant_their_left_segment() {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = substream(4811, &[1]);
        let regimes = [(0.1, 1.0), (0.15, 1.3), (0.2, 2.0)];
        let mut shortest_ratio = f64::INFINITY;
        for trial in 0..SEGMENT_INSTANCES {
            let (eps, cap) = regimes[trial % regimes.len()];
            let n = 300 + (trial % 7) * 100;
            let h = 0.02;
            let span = n as f64 * h;
            let mut v: Vec<f64> = (0..n).map(|_| rand::Rng::gen::<f64>(&mut rng) * cap).collect();
            // Blend toward the cap until the fill precondition holds.
            let target = (1.0 - eps) * span + 0.01;
            let total: f64 = v.iter().sum::<f64>() * h;
            if total < target {
                let theta = (target - total) / (cap * span - total);
                for x in &mut v {
                    *x += theta * (cap - *x);
                }
            }
            let chi = ok("density table", RateFunction::from_values(h, v.clone(), None))?;
            let report = ok("segment search", relax::calcul_segment(&chi, eps, cap))?;

            // Suffix domination verified by direct summation.
            let bins = (report.end / h).round() as usize;
            let mut suffix = 0.0;
            for i in (0..bins).rev() {
                suffix += v[i] * h;
                let need = report.level * (bins - i) as f64 * h;
                ensure(
                    suffix >= need - 1e-9,
                    format!("trial {trial}: suffix fails at bin {i} ({suffix} < {need})"),
                )?;
            }
            let bound = eps / cap * span;
            ensure(
                report.end > bound,
                format!("trial {trial}: segment {} at or below its bound {bound}", report.end),
            )?;
            shortest_ratio = shortest_ratio.min(report.end / bound);
        }
        Ok(format!(
            "{SEGMENT_INSTANCES} instances grant their segment; worst length / bound ratio {shortest_ratio:.2}"
        ))
    })();
    conclude(11, "left segment of near-full densities", None, started, outcome);
}
