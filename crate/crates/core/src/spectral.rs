//! Risk-sensitive value of the pre-limit CTMC as the Perron eigenvalue of
//! `Q + diag(r)` on a truncated box, and policy iteration over allocations.

use std::io::Write;

use crate::ctmc::{build_generator_with, generator_from_allocations, GeneratorMatrix, LatticeBox};
use crate::model::{priority_fill, scp_from_markov_control, MarkovControl, SchedulingPolicy, SystemN};
use crate::par::Execution;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SpectralOptions {
    /// Stop when the Collatz-Wielandt bracket is narrower than
    /// `tol * max(1, |value|)`.
    pub tol: f64,
    pub max_iter: usize,
    pub exec: Execution,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            tol: 1e-10,
            max_iter: 1_000_000,
            exec: Execution::default(),
        }
    }
}

impl SpectralOptions {
    pub fn with_tol(tol: f64) -> Self {
        SpectralOptions {
            tol,
            ..Default::default()
        }
    }
}

/// Perron pair of `Q + diag(r)` on a box.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    pub value: f64,
    /// Positive eigenvector in box order, equal to 1 at `anchor`.
    pub eigenvector: Vec<f64>,
    pub anchor: usize,
    pub anchor_state: Vec<u32>,
    /// Lower and upper Collatz-Wielandt bounds at exit.
    pub bracket: (f64, f64),
    /// `||(Q + diag r) V - value V||_inf / ||V||_inf`.
    pub residual: f64,
    pub iterations: usize,
}

impl EigenSolution {
    /// `key = value` record of the scalar diagnostics.
    pub fn write_record<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "value = {:.16e}", self.value)?;
        writeln!(w, "anchor_index = {}", self.anchor)?;
        let a: Vec<String> = self.anchor_state.iter().map(|v| v.to_string()).collect();
        writeln!(w, "anchor_state = [{}]", a.join(", "))?;
        writeln!(w, "bracket_lower = {:.16e}", self.bracket.0)?;
        writeln!(w, "bracket_upper = {:.16e}", self.bracket.1)?;
        writeln!(w, "residual = {:.16e}", self.residual)?;
        writeln!(w, "iterations = {}", self.iterations)?;
        Ok(())
    }

    /// One eigenvector entry per line, in box enumeration order.
    pub fn write_eigenvector<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.eigenvector {
            writeln!(w, "{v:.16e}")?;
        }
        Ok(())
    }
}

/// Index of the box state closest to `n rho`.
pub fn anchor_index(sys: &SystemN, lattice: &LatticeBox) -> usize {
    let c: Vec<u32> = sys
        .center()
        .iter()
        .zip(lattice.upper())
        .map(|(&a, &u)| a.min(u))
        .collect();
    lattice.index(&c)
}

/// Perron value of the generator tilted by the running cost of its allocations.
pub fn prelimit_value(
    gen: &GeneratorMatrix,
    sys: &SystemN,
    opts: &SpectralOptions,
) -> Result<EigenSolution> {
    let cost = gen.running_cost(sys);
    perron(gen, &cost, anchor_index(sys, gen.lattice()), None, opts)
}

/// Perron pair of `Q + diag(cost)` by uniformized power iteration with
/// `Theta = 1.05 (max outflow + max cost)`. `start` warm-starts the iteration.
pub fn perron(
    gen: &GeneratorMatrix,
    cost: &[f64],
    anchor: usize,
    start: Option<&[f64]>,
    opts: &SpectralOptions,
) -> Result<EigenSolution> {
    let m = gen.len();
    Error::check_dim(m, cost.len())?;
    let cmax = cost.iter().cloned().fold(0.0, f64::max);
    let cmin = cost.iter().cloned().fold(f64::INFINITY, f64::min);
    // shift so the diagonal of M stays nonnegative for negative costs too
    let theta = (1.05 * (gen.max_outflow() + cmax.max(0.0) + (-cmin).max(0.0))).max(1e-300);
    let mut v: Vec<f64> = match start {
        Some(s) => {
            Error::check_dim(m, s.len())?;
            if s.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::params("warm start must be strictly positive"));
            }
            let a = s[anchor];
            s.iter().map(|x| x / a).collect()
        }
        None => vec![1.0; m],
    };
    let mut av = vec![0.0; m];
    let mut bracket = (f64::NEG_INFINITY, f64::INFINITY);
    let exec = opts.exec;
    for it in 1..=opts.max_iter {
        {
            let vr = &v;
            exec.fill(&mut av, |s| gen.apply_difference(vr, s) + cost[s] * vr[s]);
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..m {
            let r = av[s] / v[s];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        bracket = (lo, hi);
        let mid = 0.5 * (lo + hi);
        if hi - lo <= opts.tol * mid.abs().max(1.0) {
            let vmax = v.iter().cloned().fold(0.0, f64::max);
            let residual = (0..m)
                .map(|s| (av[s] - mid * v[s]).abs())
                .fold(0.0, f64::max)
                / vmax;
            return Ok(EigenSolution {
                value: mid,
                eigenvector: v,
                anchor,
                anchor_state: gen.lattice().state(anchor),
                bracket,
                residual,
                iterations: it,
            });
        }
        let scale = 1.0 / (v[anchor] + av[anchor] / theta);
        for s in 0..m {
            v[s] = (v[s] + av[s] / theta) * scale;
        }
    }
    Err(Error::NonConvergence {
        solver: "power iteration",
        iterations: opts.max_iter,
        last_change: bracket.1 - bracket.0,
    })
}

/// Allocation table on a box; the priority fill is used outside the box.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    lattice: LatticeBox,
    allocations: Vec<u32>,
    n: u32,
    name: String,
}

impl TablePolicy {
    pub fn new(lattice: LatticeBox, allocations: Vec<u32>, n: u32, name: impl Into<String>) -> Result<Self> {
        Error::check_dim(lattice.len() * lattice.d(), allocations.len())?;
        Ok(TablePolicy {
            lattice,
            allocations,
            n,
            name: name.into(),
        })
    }

    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn allocations(&self) -> &[u32] {
        &self.allocations
    }
}

impl SchedulingPolicy for TablePolicy {
    fn allocate(&self, x: &[u32], z: &mut [u32]) {
        if self.lattice.contains(x) {
            let d = x.len();
            let s = self.lattice.index(x);
            z.copy_from_slice(&self.allocations[s * d..(s + 1) * d]);
        } else {
            priority_fill(x, self.n, z);
        }
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// Minimizes `sum_i coeffs_i z_i` over `{0 <= z <= x, e.z = (e.x) ^ n}`: fills
/// classes in ascending coefficient order, ties to the lowest index.
pub fn greedy_allocation(x: &[u32], coeffs: &[f64], n: u32, z: &mut [u32]) {
    let d = x.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| coeffs[a].total_cmp(&coeffs[b]).then(a.cmp(&b)));
    let mut left = n as u64;
    for &i in &order {
        let take = (x[i] as u64).min(left);
        z[i] = take as u32;
        left -= take;
    }
}

/// Per-class coefficients of the improvement objective at state `s`.
fn improvement_coeffs(
    sys: &SystemN,
    lattice: &LatticeBox,
    v: &[f64],
    s: usize,
    x: &[u32],
    out: &mut [f64],
) {
    let sn = sys.sqrt_n();
    for i in 0..x.len() {
        let dv = if x[i] > 0 {
            v[s - lattice.stride(i)] - v[s]
        } else {
            0.0
        };
        out[i] = (sys.mu_n[i] - sys.gamma_n[i]) * dv - sys.kappa[i] * v[s] / sn;
    }
}

/// Outcome of [`prelimit_optimize`].
#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub solution: EigenSolution,
    pub policy: TablePolicy,
    /// Value after each policy evaluation, non-increasing.
    pub history: Vec<f64>,
}

/// Policy iteration: evaluate by [`perron`], improve by the greedy minimizer of
/// `sum_i (mu_i z_i + gamma_i q_i)(V(x-e_i) - V(x)) + (kappa.q/sqrt n) V(x)`,
/// switching an action only on strict improvement.
pub fn prelimit_optimize(
    sys: &SystemN,
    lattice: &LatticeBox,
    opts: &SpectralOptions,
) -> Result<OptimizeResult> {
    let d = lattice.d();
    let m = lattice.len();
    let exec = opts.exec;
    let mut allocs = vec![0u32; m * d];
    exec.fill_chunks(&mut allocs, d, |s, z| priority_fill(&lattice.state(s), sys.n, z));
    let anchor = anchor_index(sys, lattice);
    let mut history = Vec::new();
    let mut start: Option<Vec<f64>> = None;
    let slack = |v: f64| 10.0 * opts.tol * v.abs().max(1.0);
    for round in 0.. {
        let gen = generator_from_allocations(sys, lattice, allocs.clone(), "policy-iteration".into(), exec)?;
        let cost = gen.running_cost(sys);
        let sol = perron(&gen, &cost, anchor, start.as_deref(), opts)?;
        if let Some(&prev) = history.last() {
            if sol.value > prev + slack(prev) {
                return Err(Error::Cycling {
                    previous: prev,
                    current: sol.value,
                });
            }
        }
        history.push(sol.value);
        let v = &sol.eigenvector;
        let mut next = allocs.clone();
        let changed: usize = {
            let flags = exec.map(m, |s| {
                let x = lattice.state(s);
                let mut c = vec![0.0; d];
                improvement_coeffs(sys, lattice, v, s, &x, &mut c);
                let mut z = vec![0u32; d];
                greedy_allocation(&x, &c, sys.n, &mut z);
                let cur = &allocs[s * d..(s + 1) * d];
                let obj = |z: &[u32]| -> f64 { (0..d).map(|i| c[i] * z[i] as f64).sum() };
                let scale: f64 = (0..d).map(|i| c[i].abs() * x[i] as f64).sum();
                if obj(&z) < obj(cur) - 1e-12 * scale {
                    Some(z)
                } else {
                    None
                }
            });
            let mut count = 0;
            for (s, z) in flags.into_iter().enumerate() {
                if let Some(z) = z {
                    next[s * d..(s + 1) * d].copy_from_slice(&z);
                    count += 1;
                }
            }
            count
        };
        if changed == 0 {
            let policy = TablePolicy::new(lattice.clone(), allocs, sys.n, format!("optimal-table(n={})", sys.n))?;
            return Ok(OptimizeResult {
                solution: sol,
                policy,
                history,
            });
        }
        if round > 10_000 {
            return Err(Error::NonConvergence {
                solver: "policy iteration",
                iterations: round,
                last_change: changed as f64,
            });
        }
        allocs = next;
        start = Some(sol.eigenvector);
    }
    unreachable!()
}

/// Value of the scheduling policy built from a Markov control.
pub fn prelimit_value_under_markov_control(
    v: &MarkovControl,
    sys: &SystemN,
    lattice: &LatticeBox,
    opts: &SpectralOptions,
) -> Result<EigenSolution> {
    let scp = scp_from_markov_control(v, sys)?;
    let gen = build_generator_with(sys, &scp, lattice, opts.exec)?;
    prelimit_value(&gen, sys, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::build_generator;
    use crate::model::{LimitParams, PriorityFill};

    #[test]
    fn zero_cost_value_is_exactly_zero() {
        let p = LimitParams::reference().with_kappa(vec![0.0, 0.0]).unwrap();
        let sys = SystemN::canonical(&p, 16).unwrap();
        let lattice = LatticeBox::for_system(&sys, 4.0).unwrap();
        let gen = build_generator(&sys, &PriorityFill { n: 16 }, &lattice).unwrap();
        let sol = prelimit_value(&gen, &sys, &SpectralOptions::default()).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.eigenvector.iter().all(|&v| v == 1.0));
        let opt = prelimit_optimize(&sys, &lattice, &SpectralOptions::default()).unwrap();
        assert_eq!(opt.solution.value, 0.0);
    }

    #[test]
    fn constant_cost_shift() {
        let sys = SystemN::canonical(&LimitParams::reference(), 9).unwrap();
        let lattice = LatticeBox::for_system(&sys, 4.0).unwrap();
        let gen = build_generator(&sys, &PriorityFill { n: 9 }, &lattice).unwrap();
        let opts = SpectralOptions::with_tol(1e-13);
        let cost = gen.running_cost(&sys);
        let a = anchor_index(&sys, &lattice);
        let base = perron(&gen, &cost, a, None, &opts).unwrap();
        let shifted: Vec<f64> = cost.iter().map(|c| c + 0.75).collect();
        let moved = perron(&gen, &shifted, a, None, &opts).unwrap();
        assert!((moved.value - base.value - 0.75).abs() < 1e-11);
        for (x, y) in base.eigenvector.iter().zip(&moved.eigenvector) {
            assert!((x - y).abs() < 1e-8 * x.max(1.0));
        }
    }

    #[test]
    fn greedy_matches_enumeration() {
        let coeff_sets = [
            vec![0.3, -0.1, 0.2],
            vec![0.0, 0.0, 0.0],
            vec![-1.0, 2.0, -1.0],
        ];
        for n in 0..5u32 {
            for a in 0..5u32 {
                for b in 0..5u32 {
                    for c in 0..5u32 {
                        if a + b + c > n + 6 {
                            continue;
                        }
                        let x = [a, b, c];
                        for coeffs in &coeff_sets {
                            let mut z = [0u32; 3];
                            greedy_allocation(&x, coeffs, n, &mut z);
                            assert!(crate::model::feasible_raw(&x, &z, n));
                            let obj = |z: &[u32]| -> f64 {
                                (0..3).map(|i| coeffs[i] * z[i] as f64).sum()
                            };
                            let target = (a + b + c).min(n);
                            let mut best = f64::INFINITY;
                            for z0 in 0..=a {
                                for z1 in 0..=b {
                                    if z0 + z1 > target || target - z0 - z1 > c {
                                        continue;
                                    }
                                    best = best.min(obj(&[z0, z1, target - z0 - z1]));
                                }
                            }
                            assert!((obj(&z) - best).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn record_lists_scalars() {
        let sys = SystemN::canonical(&LimitParams::reference(), 4).unwrap();
        let lattice = LatticeBox::for_system(&sys, 4.0).unwrap();
        let gen = build_generator(&sys, &PriorityFill { n: 4 }, &lattice).unwrap();
        let sol = prelimit_value(&gen, &sys, &SpectralOptions::default()).unwrap();
        let mut buf = Vec::new();
        sol.write_record(&mut buf, &["seed = 1".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed = 1\nvalue = "));
        assert!(text.contains("iterations = "));
    }
}
