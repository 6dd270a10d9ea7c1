#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Acceptance battery. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ersc::ctmc::{
    build_generator, entropy_cost, simulate, simulate_tilted, LatticeBox, TiltControl, TiltSegment,
    TiltValue,
};
use ersc::harness::{ao_table, variational_battery, Cell, ExperimentConfig};
use ersc::hjb::{game_minimax_check, game_solve, hjb_solve, GameControl, Grid, HjbOptions};
use ersc::lyapunov::{drift_report, DriftOptions, LyapunovZ};
use ersc::model::{
    action_feasible, scp_from_markov_control, vartheta, LatticeState, LimitParams, MarkovControl,
    PriorityFill, SchedulingPolicy, SimplexControl, SystemN,
};
use ersc::spectral::{prelimit_value, SpectralOptions};
use ersc::variational::{fclt_linear_check, varkappa_lower_bounds};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn hjb_options(cfg: &ExperimentConfig) -> HjbOptions {
    let e = &cfg.experiment;
    HjbOptions {
        tol: e.hjb_tol,
        stability_tol: e.hjb_stability_tol,
        max_iter: e.hjb_max_iter,
        ..HjbOptions::default()
    }
}

/// Tridiagonal birth-death matrix `Q + diag(cost)` of a one-class system under
/// the forced allocation `min(x, n)`, reflected at `top`, symmetrized by its
/// detailed-balance similarity.
fn birth_death_perron(sys: &SystemN, top: u32) -> f64 {
    let m = top as usize + 1;
    let n = sys.n;
    let sn = (n as f64).sqrt();
    let up = |x: u32| if x < top { sys.lambda_n[0] } else { 0.0 };
    let down = |x: u32| {
        if x == 0 {
            0.0
        } else {
            sys.mu_n[0] * x.min(n) as f64 + sys.gamma_n[0] * x.saturating_sub(n) as f64
        }
    };
    let mut a = DMatrix::<f64>::zeros(m, m);
    for x in 0..=top {
        let i = x as usize;
        let cost = sys.kappa[0] * x.saturating_sub(n) as f64 / sn;
        a[(i, i)] = cost - up(x) - down(x);
        if x < top {
            let off = (up(x) * down(x + 1)).sqrt();
            a[(i, i + 1)] = off;
            a[(i + 1, i)] = off;
        }
    }
    SymmetricEigen::new(a)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn spectral_oracle() -> Outcome {
    let t = Instant::now();
    let p = LimitParams::new(vec![1.0], vec![0.5], vec![1.0], vec![-0.3], vec![0.5], vec![0.3]).unwrap();
    let sys = SystemN::canonical(&p, 64).unwrap();
    let lattice = LatticeBox::with_margin(&sys, 10.0).unwrap();
    let gen = build_generator(&sys, &PriorityFill { n: 64 }, &lattice).unwrap();
    let sol = prelimit_value(&gen, &sys, &SpectralOptions::default()).unwrap();
    let oracle = birth_death_perron(&sys, lattice.upper()[0]);
    let rel = (sol.value - oracle).abs() / oracle.abs();
    let el = t.elapsed();
    outcome(
        lattice.len() <= 200 && rel <= 1e-8 && within(el, Duration::from_secs(1)),
        format!(
            "states {} value {:.12} dense {:.12} rel {:.2e} in {:.3?}",
            lattice.len(),
            sol.value,
            oracle,
            rel,
            el
        ),
    )
}

fn zero_cost() -> Outcome {
    let t = Instant::now();
    let p = LimitParams::reference().with_kappa(vec![0.0, 0.0]).unwrap();
    let sys = SystemN::canonical(&p, 64).unwrap();
    let lattice = LatticeBox::with_margin(&sys, 6.0).unwrap();
    let gen = build_generator(&sys, &PriorityFill { n: 64 }, &lattice).unwrap();
    let pre = prelimit_value(&gen, &sys, &SpectralOptions::default()).unwrap();
    let grid = Grid::cube(2, 6.0, 0.2).unwrap();
    let hjb = hjb_solve(&p, &grid, &HjbOptions::default()).unwrap();
    let el = t.elapsed();
    outcome(
        pre.value == 0.0 && hjb.value.abs() < 1e-8 && within(el, Duration::from_secs(10)),
        format!("prelimit {:e} hjb {:.2e} in {:.3?}", pre.value, hjb.value, el),
    )
}

fn asymptotic_trend() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::reference();
    let report = match ao_table(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ao_table failed: {e}")),
    };
    let lam = report.get("hjb_value").and_then(Cell::as_f64).unwrap_or(f64::NAN);
    let table = report.table("ao").expect("ao table");
    let values: Vec<f64> = table
        .values("prelimit_value")
        .iter()
        .map(|c| c.as_f64().unwrap_or(f64::NAN))
        .collect();
    let gaps: Vec<f64> = values.iter().map(|v| (v - lam).abs()).collect();
    let non_increasing = gaps.iter().all(|g| g.is_finite()) && gaps.windows(2).all(|w| w[1] <= w[0]);
    let final_rel = gaps.last().copied().unwrap_or(f64::NAN) / lam.abs();
    let el = t.elapsed();
    outcome(
        gaps.len() == cfg.experiment.n_list.len()
            && non_increasing
            && final_rel <= 0.15
            && within(el, Duration::from_secs(600)),
        format!(
            "Lambda {:.8} gaps {:?} final relative gap {:.4} in {:.1?}",
            lam,
            gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>(),
            final_rel,
            el
        ),
    )
}

fn game_limits() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::reference();
    let e = &cfg.experiment;
    let p = &cfg.params;
    let opts = hjb_options(&cfg);
    let grid = Grid::cube(2, e.game_grid_half_width, e.game_grid_h).unwrap();
    let hjb = hjb_solve(p, &grid, &opts).unwrap();
    let mut values = Vec::new();
    let mut minimax_gap: f64 = 0.0;
    for l in [1.0, 2.0, 4.0, 8.0] {
        let g = match game_solve(&GameControl::Optimize, p, l, &grid, &opts) {
            Ok(g) => g,
            Err(err) => return outcome(false, format!("game l = {l} failed: {err}")),
        };
        let check = game_minimax_check(&g, p, &opts).unwrap();
        minimax_gap = minimax_gap.max(check.max_gap());
        values.push(g.value);
    }
    let monotone = values.windows(2).all(|w| w[1] >= w[0] - 1e-8);
    let gap = (values[3] - hjb.value).abs();
    let el = t.elapsed();
    outcome(
        monotone && minimax_gap <= 1e-8 && gap <= 10.0 * opts.tol && within(el, Duration::from_secs(300)),
        format!(
            "rho {:?} Lambda {:.10} |rho_8 - Lambda| {:.2e} minimax gap {:.2e} in {:.1?}",
            values.iter().map(|v| format!("{v:.8}")).collect::<Vec<_>>(),
            hjb.value,
            gap,
            minimax_gap,
            el
        ),
    )
}

fn one_sidedness() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::reference();
    let (report, certs) = match variational_battery(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("battery failed: {e}")),
    };
    let table = report.table("certificates").expect("certificate table");
    let ids = table.values("tilt_id");
    let count = |prefix: &str| ids.iter().filter(|c| c.to_string().starts_with(prefix)).count();
    let (bm, poisson) = (count("bm-"), count("poisson-"));
    // independent recomputation of the one-sided verdict
    let violations = certs
        .iter()
        .filter(|c| {
            let combined = (c.stderr * c.stderr + c.direct_stderr * c.direct_stderr).sqrt();
            !(c.estimate <= c.direct + 3.0 * combined)
        })
        .count();
    let el = t.elapsed();
    outcome(
        bm >= 20 && poisson >= 20 && violations == 0 && within(el, Duration::from_secs(300)),
        format!("{bm} brownian + {poisson} poisson certificates, {violations} violations in {el:.2?}"),
    )
}

fn fclt_closed_form() -> Outcome {
    let t = Instant::now();
    let grid = [0.5, 1.0, 2.0];
    let ns = [1e2, 1e4, 1e6];
    let mut all = true;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in grid {
        for lambda in grid {
            let gaps: Vec<f64> = ns
                .iter()
                .map(|&n| {
                    let r = fclt_linear_check(c, lambda, n, 1.0).unwrap();
                    all &= r.holds;
                    r.gap()
                })
                .collect();
            for w in gaps.windows(2) {
                let ratio = (w[0] / w[1]).ln();
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
        }
    }
    let el = t.elapsed();
    outcome(
        all && lo >= 1.5 && hi <= 2.7 && within(el, Duration::from_secs(1)),
        format!("all bounds hold: {all}; ln gap ratio per 100x n in [{lo:.3}, {hi:.3}] in {el:.2?}"),
    )
}

fn varkappa_inequalities() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0usize;
    let mut oracle_violations = 0usize;
    for _ in 0..100_000 {
        let l: f64 = rng.random_range(0.01..50.0);
        let r: f64 = if rng.random_bool(0.5) {
            rng.random_range(-1.0..=0.0)
        } else {
            rng.random_range(0.0..l)
        };
        if r <= -1.0 {
            continue;
        }
        let (a, b) = varkappa_lower_bounds(r, l);
        violations += usize::from(!a) + usize::from(!b);
        // (1+r) ln(1+r) - r computed independently
        let k = (1.0 + r) * r.ln_1p() - r;
        let slack = 1e-15 * r * r;
        if r <= 0.0 && k < 0.5 * r * r - slack {
            oracle_violations += 1;
        }
        if r >= 0.0 && k < r * r / (2.0 * (1.0 + l)) - slack {
            oracle_violations += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        violations == 0 && oracle_violations == 0 && within(el, Duration::from_secs(1)),
        format!("{violations} violations, {oracle_violations} oracle violations on 1e5 points in {el:.2?}"),
    )
}

/// Largest radius at which every control yields a feasible queue: inside the
/// region each headcount is at least `rho_i n - K sqrt(n)` while the queue is
/// at most `d K sqrt(n) + d`.
fn universal_radius(sys: &SystemN) -> f64 {
    let d = sys.d() as f64;
    let nf = sys.n as f64;
    let rmin = sys.rho.iter().cloned().fold(f64::INFINITY, f64::min);
    (rmin * nf - d) / ((d + 1.0) * nf.sqrt())
}

fn rounding_and_scp() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad_round = 0usize;
    for _ in 0..100_000 {
        let d = rng.random_range(1..=6usize);
        let mut z: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..50.0)).collect();
        let s: f64 = z.iter().sum();
        z[d - 1] += s.ceil() - s;
        let LatticeState(x) = vartheta(&z).unwrap();
        let xs: u64 = x.iter().map(|&v| v as u64).sum();
        let dev = x
            .iter()
            .zip(&z)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        if xs as f64 != z.iter().sum::<f64>().round() || dev > 2.0 * d as f64 {
            bad_round += 1;
        }
    }
    let cfg = ExperimentConfig::reference();
    let p = &cfg.params;
    let mut states = 0usize;
    let mut infeasible = 0usize;
    let mut failures = Vec::new();
    for &n in &cfg.experiment.n_list {
        let sys = SystemN::canonical(p, n).unwrap();
        let lattice = LatticeBox::with_margin(&sys, cfg.experiment.margin).unwrap();
        let k = universal_radius(&sys);
        let controls = [
            MarkovControl::constant(SimplexControl::vertex(2, 0), k),
            MarkovControl::constant(SimplexControl::vertex(2, 1), k),
            MarkovControl::constant(SimplexControl::new(vec![0.3, 0.7]).unwrap(), k),
            MarkovControl::new(
                |x: &[f64]| {
                    let a = 0.5 + 0.5 * (x[0] - 2.0 * x[1]).sin();
                    SimplexControl::new(vec![a, 1.0 - a]).unwrap()
                },
                SimplexControl::last(2),
                k,
                true,
            ),
        ];
        for v in &controls {
            let scp = match scp_from_markov_control(v, &sys) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(format!("n={n}: {e}"));
                    continue;
                }
            };
            let mut z = vec![0u32; 2];
            for s in 0..lattice.len() {
                let x = lattice.state(s);
                scp.allocate(&x, &mut z);
                states += 1;
                if !action_feasible(&LatticeState(x), &ersc::model::Allocation(z.clone()), n) {
                    infeasible += 1;
                }
            }
        }
    }
    let el = t.elapsed();
    outcome(
        bad_round == 0 && failures.is_empty() && infeasible == 0 && within(el, Duration::from_secs(10)),
        format!(
            "{bad_round} rounding failures on 1e5 inputs; {states} box states checked, {infeasible} infeasible, \
             construction failures {failures:?} in {el:.2?}"
        ),
    )
}

fn lyapunov_certificate() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::reference();
    let e = &cfg.experiment;
    let p = &cfg.params;
    let sys = SystemN::canonical(p, 64).unwrap();
    let lattice = LatticeBox::with_margin(&sys, e.margin).unwrap();
    let z = LyapunovZ::new(e.eps0, e.eps1, p.mu.clone()).unwrap();
    let r = drift_report(
        &sys,
        &PriorityFill { n: 64 },
        &TiltControl::Identity,
        &lattice,
        e.shell[0],
        e.shell[1],
        &z,
        &DriftOptions::default(),
    );
    let el = t.elapsed();
    match r {
        Ok(r) => outcome(
            r.certified() && within(el, Duration::from_secs(30)),
            format!(
                "{} shell states, C0 {:.4} C1 {:.4} in {:.2?}",
                r.states, r.c0, r.c1, el
            ),
        ),
        Err(err) => outcome(false, format!("drift_report failed: {err}")),
    }
}

fn tilted_consistency() -> Outcome {
    let t = Instant::now();
    let p = LimitParams::reference();
    let sys = SystemN::canonical(&p, 16).unwrap();
    let policy = PriorityFill { n: 16 };
    let x0 = sys.center();
    let mut mismatched = 0usize;
    let mut events = 0usize;
    for seed in 0..100u64 {
        let plain = simulate(&sys, &policy, &x0, 20.0, seed).unwrap();
        let tilted = simulate_tilted(&sys, &policy, &TiltControl::Identity, &x0, 20.0, seed).unwrap();
        events += plain.events();
        let same = plain.times == tilted.times
            && plain.states == tilted.states
            && plain.allocations == tilted.allocations
            && plain.clocks == tilted.clocks
            && plain.cost == tilted.cost
            && tilted.total_entropy == 0.0;
        mismatched += usize::from(!same);
    }
    // closed form: sum_i lambda_i k(phi_i) + n mu_i k(psi_i) + n gamma_i k(varphi_i)
    let k = |r: f64| r * r.ln() - r + 1.0;
    let closed = |v: &TiltValue| -> f64 {
        let nf = sys.n as f64;
        (0..2)
            .map(|i| {
                sys.lambda_n[i] * k(v.phi[i]) + nf * sys.mu_n[i] * k(v.psi[i]) + nf * sys.gamma_n[i] * k(v.varphi[i])
            })
            .sum()
    };
    let values = [
        TiltValue {
            phi: vec![1.3, 0.8],
            psi: vec![0.9, 1.1],
            varphi: vec![1.5, 0.6],
        },
        TiltValue {
            phi: vec![0.5, 2.0],
            psi: vec![1.02, 0.97],
            varphi: vec![1.0, 1.25],
        },
    ];
    let mut worst: f64 = 0.0;
    for (j, v) in values.iter().enumerate() {
        let horizon = 10.0;
        let path = simulate_tilted(&sys, &policy, &TiltControl::Constant(v.clone()), &x0, horizon, 500 + j as u64)
            .unwrap();
        let c = closed(v);
        worst = worst.max((path.total_entropy / horizon - c).abs() / c);
        let trace = [
            TiltSegment { duration: 0.7, value: v.clone() },
            TiltSegment { duration: 2.3, value: v.clone() },
        ];
        worst = worst.max((entropy_cost(&trace, &sys).unwrap() - c).abs() / c);
    }
    let el = t.elapsed();
    outcome(
        mismatched == 0 && worst <= 1e-12 && within(el, Duration::from_secs(30)),
        format!(
            "{mismatched} of 100 identity-tilt paths differ ({events} events); \
             constant-tilt entropy relative error {worst:.2e} in {el:.2?}"
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("d=1 spectral oracle", spectral_oracle),
        ("zero-cost identities", zero_cost),
        ("asymptotic-optimality trend", asymptotic_trend),
        ("game monotonicity and minimax", game_limits),
        ("variational one-sidedness", one_sidedness),
        ("FCLT closed form", fclt_closed_form),
        ("varkappa inequalities", varkappa_inequalities),
        ("rounding and SCP feasibility", rounding_and_scp),
        ("Lyapunov certificate", lyapunov_certificate),
        ("tilted-simulation consistency", tilted_consistency),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        println!(
            "{} criterion {:>2} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
