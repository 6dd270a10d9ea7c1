//! Controlled queueing CTMC: truncated generator assembly, event-driven path
//! simulation with optional rate tilts, entropy accounting and excursion
//! statistics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::model::{feasible_raw, MarkovScp, SchedulingPolicy, SystemN};
use crate::par::Execution;
use crate::rng;
use crate::variational::varkappa;
use crate::{Error, Result};

/// Box `{0 <= x_i <= upper_i}` with row-major enumeration (last class fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeBox {
    upper: Vec<u32>,
    strides: Vec<usize>,
    len: usize,
}

impl LatticeBox {
    pub fn new(upper: Vec<u32>) -> Result<Self> {
        if upper.is_empty() {
            return Err(Error::params("empty box"));
        }
        let d = upper.len();
        let mut strides = vec![1usize; d];
        for i in (0..d - 1).rev() {
            strides[i] = strides[i + 1] * (upper[i + 1] as usize + 1);
        }
        let len = strides[0] * (upper[0] as usize + 1);
        if len > u32::MAX as usize {
            return Err(Error::BoxTooSmall(format!("box with {len} states is too large")));
        }
        Ok(LatticeBox { upper, strides, len })
    }

    /// `upper_i = ceil(n rho_i + margin sqrt(n))`; the margin must be at least 4.
    pub fn for_system(sys: &SystemN, margin: f64) -> Result<Self> {
        if !(margin >= 4.0) {
            return Err(Error::BoxTooSmall(format!("margin {margin} is below 4")));
        }
        Self::with_margin(sys, margin)
    }

    /// Same as [`for_system`](Self::for_system) without the lower limit on the margin.
    pub fn with_margin(sys: &SystemN, margin: f64) -> Result<Self> {
        let nf = sys.n as f64;
        let sn = sys.sqrt_n();
        Self::new(
            sys.rho
                .iter()
                .map(|r| (nf * r + margin * sn).ceil().max(0.0) as u32)
                .collect(),
        )
    }

    /// Each upper bound scaled by `factor` (rounded up).
    pub fn enlarged(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.upper
                .iter()
                .map(|&u| (u as f64 * factor).ceil() as u32)
                .collect(),
        )
    }

    pub fn d(&self) -> usize {
        self.upper.len()
    }

    pub fn upper(&self) -> &[u32] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, x: &[u32]) -> bool {
        x.len() == self.d() && x.iter().zip(&self.upper).all(|(a, b)| a <= b)
    }

    pub fn index(&self, x: &[u32]) -> usize {
        x.iter().zip(&self.strides).map(|(&a, s)| a as usize * s).sum()
    }

    pub fn state_into(&self, mut idx: usize, out: &mut [u32]) {
        for i in 0..self.d() {
            out[i] = (idx / self.strides[i]) as u32;
            idx %= self.strides[i];
        }
    }

    pub fn state(&self, idx: usize) -> Vec<u32> {
        let mut out = vec![0; self.d()];
        self.state_into(idx, &mut out);
        out
    }

    pub fn stride(&self, i: usize) -> usize {
        self.strides[i]
    }
}

/// Sparse generator on a [`LatticeBox`] with reflecting truncation. Row `s`
/// holds `2d` slots: `x + e_i` at slot `2i`, `x - e_i` at slot `2i + 1`.
/// Suppressed jumps have rate 0 and point back to `s`.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    lattice: LatticeBox,
    targets: Vec<u32>,
    rates: Vec<f64>,
    outflow: Vec<f64>,
    allocations: Vec<u32>,
    policy: String,
}

impl GeneratorMatrix {
    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn len(&self) -> usize {
        self.outflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outflow.is_empty()
    }

    pub fn policy(&self) -> &str {
        &self.policy
    }

    pub fn outflow(&self) -> &[f64] {
        &self.outflow
    }

    pub fn max_outflow(&self) -> f64 {
        self.outflow.iter().cloned().fold(0.0, f64::max)
    }

    /// Allocation used at state `s`.
    pub fn allocation(&self, s: usize) -> &[u32] {
        let d = self.lattice.d();
        &self.allocations[s * d..(s + 1) * d]
    }

    pub fn allocations(&self) -> &[u32] {
        &self.allocations
    }

    /// Off-diagonal entries `(target, rate)` of row `s`, including zero-rate slots.
    pub fn row(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let w = 2 * self.lattice.d();
        self.targets[s * w..(s + 1) * w]
            .iter()
            .zip(&self.rates[s * w..(s + 1) * w])
            .map(|(&t, &r)| (t as usize, r))
    }

    /// Entry `(s, t)` of the generator.
    pub fn entry(&self, s: usize, t: usize) -> f64 {
        if s == t {
            -self.outflow[s]
        } else {
            self.row(s).filter(|&(j, _)| j == t).map(|(_, r)| r).sum()
        }
    }

    /// Dense row-major copy, for small boxes.
    pub fn to_dense(&self) -> Vec<f64> {
        let m = self.len();
        let mut a = vec![0.0; m * m];
        for s in 0..m {
            a[s * m + s] = -self.outflow[s];
            for (t, r) in self.row(s) {
                if t != s {
                    a[s * m + t] += r;
                }
            }
        }
        a
    }

    /// `(Q v)(s) = sum_t q_st (v_t - v_s)`; exact zero on constants.
    pub fn apply_difference(&self, v: &[f64], s: usize) -> f64 {
        let vs = v[s];
        self.row(s).map(|(t, r)| r * (v[t] - vs)).sum()
    }

    /// Running cost `kappa . q / sqrt(n)` per state under the stored allocations.
    pub fn running_cost(&self, sys: &SystemN) -> Vec<f64> {
        let d = self.lattice.d();
        let mut x = vec![0u32; d];
        (0..self.len())
            .map(|s| {
                self.lattice.state_into(s, &mut x);
                sys.queue_cost(&x, self.allocation(s))
            })
            .collect()
    }
}

fn check_box(sys: &SystemN, lattice: &LatticeBox) -> Result<()> {
    Error::check_dim(sys.d(), lattice.d())?;
    let nf = sys.n as f64;
    for (i, (r, &u)) in sys.rho.iter().zip(lattice.upper()).enumerate() {
        if nf * r > u as f64 {
            return Err(Error::BoxTooSmall(format!(
                "n rho_{} = {} lies above the box bound {u}",
                i + 1,
                nf * r
            )));
        }
    }
    Ok(())
}

/// Assembles the generator of a scheduling policy on a box.
pub fn build_generator(
    sys: &SystemN,
    policy: &dyn SchedulingPolicy,
    lattice: &LatticeBox,
) -> Result<GeneratorMatrix> {
    build_generator_with(sys, policy, lattice, Execution::default())
}

pub fn build_generator_with(
    sys: &SystemN,
    policy: &dyn SchedulingPolicy,
    lattice: &LatticeBox,
    exec: Execution,
) -> Result<GeneratorMatrix> {
    check_box(sys, lattice)?;
    let d = lattice.d();
    let mut allocations = vec![0u32; lattice.len() * d];
    exec.fill_chunks(&mut allocations, d, |s, z| {
        let x = lattice.state(s);
        policy.allocate(&x, z);
    });
    generator_from_allocations(sys, lattice, allocations, policy.describe(), exec)
}

/// Assembles the generator from a per-state allocation table (box order,
/// stride `d`), verifying feasibility at every state.
pub fn generator_from_allocations(
    sys: &SystemN,
    lattice: &LatticeBox,
    allocations: Vec<u32>,
    policy: String,
    exec: Execution,
) -> Result<GeneratorMatrix> {
    check_box(sys, lattice)?;
    let d = lattice.d();
    let m = lattice.len();
    Error::check_dim(m * d, allocations.len())?;
    let bad = exec
        .map(m, |s| {
            let x = lattice.state(s);
            (!feasible_raw(&x, &allocations[s * d..(s + 1) * d], sys.n)).then_some(s)
        })
        .into_iter()
        .flatten()
        .next();
    if let Some(s) = bad {
        return Err(Error::Infeasible {
            state: lattice.state(s),
            reason: format!(
                "allocation {:?} is not in the action set",
                &allocations[s * d..(s + 1) * d]
            ),
        });
    }
    let w = 2 * d;
    let mut targets = vec![0u32; m * w];
    let mut rates = vec![0.0; m * w];
    exec.fill_chunks(&mut targets, w, |s, row| {
        let x = lattice.state(s);
        for i in 0..d {
            row[2 * i] = if x[i] < lattice.upper()[i] {
                (s + lattice.stride(i)) as u32
            } else {
                s as u32
            };
            row[2 * i + 1] = if x[i] > 0 {
                (s - lattice.stride(i)) as u32
            } else {
                s as u32
            };
        }
    });
    exec.fill_chunks(&mut rates, w, |s, row| {
        let x = lattice.state(s);
        let z = &allocations[s * d..(s + 1) * d];
        for i in 0..d {
            row[2 * i] = if x[i] < lattice.upper()[i] {
                sys.lambda_n[i]
            } else {
                0.0
            };
            row[2 * i + 1] =
                sys.mu_n[i] * z[i] as f64 + sys.gamma_n[i] * (x[i] - z[i]) as f64;
        }
    });
    let mut outflow = vec![0.0; m];
    exec.fill(&mut outflow, |s| rates[s * w..(s + 1) * w].iter().sum());
    Ok(GeneratorMatrix {
        lattice: lattice.clone(),
        targets,
        rates,
        outflow,
        allocations,
        policy,
    })
}

/// Rate multipliers for the arrival, service and abandonment clocks of each class.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltValue {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub varphi: Vec<f64>,
}

impl TiltValue {
    pub fn identity(d: usize) -> Self {
        TiltValue {
            phi: vec![1.0; d],
            psi: vec![1.0; d],
            varphi: vec![1.0; d],
        }
    }

    /// Entropy rate `sum_i lambda^n_i k(phi_i) + n mu^n_i k(psi_i) + n gamma^n_i k(varphi_i)`.
    pub fn entropy_rate(&self, sys: &SystemN) -> f64 {
        let nf = sys.n as f64;
        (0..sys.d())
            .map(|i| {
                sys.lambda_n[i] * varkappa(self.phi[i])
                    + nf * sys.mu_n[i] * varkappa(self.psi[i])
                    + nf * sys.gamma_n[i] * varkappa(self.varphi[i])
            })
            .sum()
    }

    fn check(&self, time: f64) -> Result<()> {
        for (name, v) in [("arrival", &self.phi), ("service", &self.psi), ("abandonment", &self.varphi)] {
            if let Some(i) = v.iter().position(|&m| !(m > 0.0) || !m.is_finite()) {
                return Err(Error::TiltNonPositive {
                    value: v[i],
                    clock: format!("{name}[{}]", i + 1),
                    time,
                });
            }
        }
        Ok(())
    }
}

type FeedbackFn = dyn Fn(&[u32], &mut TiltValue) + Send + Sync;

/// Tilt of the clock rates: constant, state feedback (evaluated at the left
/// end of each inter-event interval) or piecewise constant in time.
#[derive(Clone)]
pub enum TiltControl {
    Identity,
    Constant(TiltValue),
    Feedback(Arc<FeedbackFn>),
    /// `values[k]` applies on `[breaks[k], breaks[k+1])`; `breaks[0] = 0` and
    /// the last value extends to infinity.
    Table { breaks: Vec<f64>, values: Vec<TiltValue> },
}

impl fmt::Debug for TiltControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TiltControl::Identity => write!(f, "Identity"),
            TiltControl::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            TiltControl::Feedback(_) => write!(f, "Feedback(..)"),
            TiltControl::Table { breaks, values } => f
                .debug_struct("Table")
                .field("breaks", breaks)
                .field("values", values)
                .finish(),
        }
    }
}

impl TiltControl {
    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(&[u32], &mut TiltValue) + Send + Sync + 'static,
    {
        TiltControl::Feedback(Arc::new(f))
    }

    fn validate(&self, d: usize) -> Result<()> {
        let dims = |v: &TiltValue| -> Result<()> {
            for w in [&v.phi, &v.psi, &v.varphi] {
                Error::check_dim(d, w.len())?;
            }
            Ok(())
        };
        match self {
            TiltControl::Constant(v) => dims(v),
            TiltControl::Table { breaks, values } => {
                if breaks.len() != values.len() || breaks.first() != Some(&0.0) {
                    return Err(Error::params("tilt table needs one value per break, starting at 0"));
                }
                if breaks.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::params("tilt table breaks must increase"));
                }
                values.iter().try_for_each(dims)
            }
            _ => Ok(()),
        }
    }
}

/// Clock that produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Arrival(usize),
    Service(usize),
    Abandonment(usize),
}

impl Clock {
    fn from_index(k: usize) -> Self {
        match k % 3 {
            0 => Clock::Arrival(k / 3),
            1 => Clock::Service(k / 3),
            _ => Clock::Abandonment(k / 3),
        }
    }

    pub fn class(self) -> usize {
        match self {
            Clock::Arrival(i) | Clock::Service(i) | Clock::Abandonment(i) => i,
        }
    }

    pub fn label(self) -> String {
        match self {
            Clock::Arrival(i) => format!("A{}", i + 1),
            Clock::Service(i) => format!("S{}", i + 1),
            Clock::Abandonment(i) => format!("R{}", i + 1),
        }
    }
}

/// Piecewise-constant sample path. Row 0 is the initial state at time 0 with no
/// clock; each further row is an event. `cost` and `entropy` are accumulated
/// integrals up to the row's time; the final totals cover `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub d: usize,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub states: Vec<u32>,
    pub allocations: Vec<u32>,
    pub clocks: Vec<Option<Clock>>,
    pub cost: Vec<f64>,
    pub entropy: Vec<f64>,
    pub total_cost: f64,
    pub total_entropy: f64,
}

impl PathRecord {
    pub fn events(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, k: usize) -> &[u32] {
        &self.states[k * self.d..(k + 1) * self.d]
    }

    pub fn allocation(&self, k: usize) -> &[u32] {
        &self.allocations[k * self.d..(k + 1) * self.d]
    }

    /// Holding intervals `(start, end, row)` covering `[0, horizon]`.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        (0..self.times.len()).map(move |k| {
            let end = self.times.get(k + 1).copied().unwrap_or(self.horizon);
            (self.times[k], end, k)
        })
    }

    pub fn count(&self, pred: impl Fn(Clock) -> bool) -> usize {
        self.clocks.iter().flatten().filter(|&&c| pred(c)).count()
    }

    /// Columnar text: `#`-prefixed preamble lines, one header line, then one row
    /// per record entry.
    pub fn write_columns<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        let mut header = vec!["time".to_string()];
        header.extend((1..=self.d).map(|i| format!("x{i}")));
        header.extend((1..=self.d).map(|i| format!("z{i}")));
        header.extend(["clock", "cost_accum", "entropy_accum"].map(String::from));
        writeln!(w, "{}", header.join(" "))?;
        for k in 0..self.times.len() {
            let mut row = vec![format!("{:.16e}", self.times[k])];
            row.extend(self.state(k).iter().map(|v| v.to_string()));
            row.extend(self.allocation(k).iter().map(|v| v.to_string()));
            row.push(self.clocks[k].map_or_else(|| "-".to_string(), Clock::label));
            row.push(format!("{:.16e}", self.cost[k]));
            row.push(format!("{:.16e}", self.entropy[k]));
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Plain path of the queueing process on `[0, horizon]`.
pub fn simulate(
    sys: &SystemN,
    policy: &dyn SchedulingPolicy,
    x0: &[u32],
    horizon: f64,
    seed: u64,
) -> Result<PathRecord> {
    run(sys, policy, None, x0, horizon, seed)
}

/// Path of the tilted process: each clock rate is multiplied by its tilt, and
/// the entropy integral of the tilt is accumulated exactly per segment.
pub fn simulate_tilted(
    sys: &SystemN,
    policy: &dyn SchedulingPolicy,
    tilt: &TiltControl,
    x0: &[u32],
    horizon: f64,
    seed: u64,
) -> Result<PathRecord> {
    tilt.validate(sys.d())?;
    run(sys, policy, Some(tilt), x0, horizon, seed)
}

fn exp1(r: &mut ChaCha8Rng) -> f64 {
    r.sample::<f64, _>(Exp1)
}

/// Next-reaction scheme with one random stream per clock: clock `k` fires when
/// its integrated rate reaches the running sum of its unit exponentials.
fn run(
    sys: &SystemN,
    policy: &dyn SchedulingPolicy,
    tilt: Option<&TiltControl>,
    x0: &[u32],
    horizon: f64,
    seed: u64,
) -> Result<PathRecord> {
    let d = sys.d();
    Error::check_dim(d, x0.len())?;
    if !(horizon > 0.0) {
        return Err(Error::params("horizon must be positive"));
    }
    let nclocks = 3 * d;
    let mut streams: Vec<ChaCha8Rng> = (0..nclocks).map(|k| rng::stream(seed, k as u64)).collect();
    let mut internal = vec![0.0; nclocks];
    let mut next: Vec<f64> = streams.iter_mut().map(exp1).collect();
    let mut rates = vec![0.0; nclocks];

    let mut x = x0.to_vec();
    let mut z = vec![0u32; d];
    let mut tv = TiltValue::identity(d);
    let mut table_pos = 0usize;

    let mut rec = PathRecord {
        d,
        horizon,
        times: vec![0.0],
        states: x.clone(),
        allocations: vec![],
        clocks: vec![None],
        cost: vec![0.0],
        entropy: vec![0.0],
        total_cost: 0.0,
        total_entropy: 0.0,
    };
    let mut cost = Accum::default();
    let mut entropy = Accum::default();
    let mut t = 0.0;

    policy.allocate(&x, &mut z);
    check_alloc(&x, &z, sys.n)?;
    rec.allocations.extend_from_slice(&z);

    loop {
        // tilt in force on the current segment
        let mut breakpoint = f64::INFINITY;
        let mut entropy_rate = 0.0;
        if let Some(tc) = tilt {
            match tc {
                TiltControl::Identity => {}
                TiltControl::Constant(v) => tv.clone_from(v),
                TiltControl::Feedback(f) => f(&x, &mut tv),
                TiltControl::Table { breaks, values } => {
                    while table_pos + 1 < breaks.len() && breaks[table_pos + 1] <= t {
                        table_pos += 1;
                    }
                    tv.clone_from(&values[table_pos]);
                    if table_pos + 1 < breaks.len() {
                        breakpoint = breaks[table_pos + 1];
                    }
                }
            }
            tv.check(t)?;
            entropy_rate = tv.entropy_rate(sys);
        }
        for i in 0..d {
            let q = (x[i] - z[i]) as f64;
            rates[3 * i] = sys.lambda_n[i];
            rates[3 * i + 1] = sys.mu_n[i] * z[i] as f64;
            rates[3 * i + 2] = sys.gamma_n[i] * q;
            if tilt.is_some() {
                rates[3 * i] *= tv.phi[i];
                rates[3 * i + 1] *= tv.psi[i];
                rates[3 * i + 2] *= tv.varphi[i];
            }
        }
        let mut fire = None;
        let mut wait = f64::INFINITY;
        for k in 0..nclocks {
            if rates[k] > 0.0 {
                let dt = (next[k] - internal[k]) / rates[k];
                if dt < wait {
                    wait = dt;
                    fire = Some(k);
                }
            }
        }
        let event_time = t + wait;
        let end = event_time.min(breakpoint).min(horizon);
        let dt = end - t;
        let seg_cost = sys.queue_cost(&x, &z);
        cost.add(seg_cost * dt);
        entropy.add(entropy_rate * dt);
        if end >= horizon && event_time >= horizon {
            break;
        }
        if end < event_time {
            // pseudo-event at a tilt breakpoint
            for k in 0..nclocks {
                internal[k] += rates[k] * dt;
            }
            t = end;
            continue;
        }
        let k = fire.expect("finite wait implies a firing clock");
        for j in 0..nclocks {
            if j != k {
                internal[j] += rates[j] * dt;
            }
        }
        internal[k] = next[k];
        next[k] += exp1(&mut streams[k]);
        t = event_time;
        let i = k / 3;
        if k % 3 == 0 {
            x[i] += 1;
        } else {
            x[i] -= 1;
        }
        policy.allocate(&x, &mut z);
        check_alloc(&x, &z, sys.n)?;
        rec.times.push(t);
        rec.states.extend_from_slice(&x);
        rec.allocations.extend_from_slice(&z);
        rec.clocks.push(Some(Clock::from_index(k)));
        rec.cost.push(cost.value());
        rec.entropy.push(entropy.value());
    }
    rec.total_cost = cost.value();
    rec.total_entropy = entropy.value();
    Ok(rec)
}

fn check_alloc(x: &[u32], z: &[u32], n: u32) -> Result<()> {
    if feasible_raw(x, z, n) {
        Ok(())
    } else {
        Err(Error::Infeasible {
            state: x.to_vec(),
            reason: format!("policy returned {z:?}"),
        })
    }
}

/// One constant-tilt piece of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSegment {
    pub duration: f64,
    pub value: TiltValue,
}

/// Time-averaged entropy cost `(1/T) int k^n(tilt_s) ds` of a piecewise-constant
/// trace, `T` being the total duration.
pub fn entropy_cost(trace: &[TiltSegment], sys: &SystemN) -> Result<f64> {
    let mut total = Accum::default();
    let mut horizon = Accum::default();
    let mut elapsed = 0.0;
    for seg in trace {
        for w in [&seg.value.phi, &seg.value.psi, &seg.value.varphi] {
            Error::check_dim(sys.d(), w.len())?;
        }
        if !(seg.duration >= 0.0) {
            return Err(Error::params("segment durations must be nonnegative"));
        }
        seg.value.check(elapsed)?;
        total.add(seg.value.entropy_rate(sys) * seg.duration);
        horizon.add(seg.duration);
        elapsed += seg.duration;
    }
    let t = horizon.value();
    if !(t > 0.0) {
        return Err(Error::params("trace must have positive total duration"));
    }
    Ok(total.value() / t)
}

/// Excursions of a path outside `S_n = {sum_{i<d} x_i <= n}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExcursionStats {
    /// Fraction of `[0, T]` spent outside `S_n`.
    pub fraction_outside: f64,
    /// `int kappa . (xhat - zhat) 1{outside}` under the allocations of the path.
    pub delta1: f64,
    /// `int kappa . q^n(x)/sqrt(n) 1{outside}` with `q^n` the policy's target queue.
    pub delta2: f64,
}

pub fn boundary_excursion_stats(path: &PathRecord, scp: &MarkovScp) -> Result<ExcursionStats> {
    let sys = scp.system();
    Error::check_dim(sys.d(), path.d)?;
    let d = path.d;
    let n = sys.n as u64;
    let mut out_time = Accum::default();
    let mut d1 = Accum::default();
    let mut d2 = Accum::default();
    for (t0, t1, k) in path.segments() {
        let x = path.state(k);
        let head: u64 = x[..d - 1].iter().map(|&v| v as u64).sum();
        if head > n {
            let dt = t1 - t0;
            out_time.add(dt);
            d1.add(dt * sys.queue_cost(x, path.allocation(k)));
            let q = scp.target_queue(x);
            let tq: f64 = q.iter().zip(&sys.kappa).map(|(&a, k)| k * a as f64).sum();
            d2.add(dt * tq / sys.sqrt_n());
        }
    }
    Ok(ExcursionStats {
        fraction_outside: out_time.value() / path.horizon,
        delta1: d1.value(),
        delta2: d2.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LimitParams, MarkovControl, PriorityFill, SimplexControl};
    use crate::model::scp_from_markov_control;
    use approx::assert_relative_eq;

    fn reference(n: u32) -> SystemN {
        SystemN::canonical(&LimitParams::reference(), n).unwrap()
    }

    #[test]
    fn box_enumeration_is_a_bijection() {
        let b = LatticeBox::new(vec![3, 4, 2]).unwrap();
        assert_eq!(b.len(), 60);
        for s in 0..b.len() {
            assert_eq!(b.index(&b.state(s)), s);
        }
        assert_eq!(b.state(1), vec![0, 0, 1]);
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let sys = reference(16);
        let lattice = LatticeBox::for_system(&sys, 4.0).unwrap();
        let g = build_generator(&sys, &PriorityFill { n: 16 }, &lattice).unwrap();
        for s in 0..g.len() {
            let off: f64 = g.row(s).filter(|&(t, _)| t != s).map(|(_, r)| r).sum();
            assert_eq!(off - g.outflow()[s], 0.0);
            let x = lattice.state(s);
            for i in 0..2 {
                if x[i] == 0 {
                    assert_eq!(g.row(s).nth(2 * i + 1).unwrap().1, 0.0);
                }
            }
        }
    }

    #[test]
    fn one_class_down_rate() {
        let p = LimitParams::new(vec![1.0], vec![0.0], vec![1.0], vec![0.0], vec![0.5], vec![1.0])
            .unwrap();
        let sys = SystemN::canonical(&p, 2).unwrap();
        let lattice = LatticeBox::new(vec![6]).unwrap();
        let g = build_generator(&sys, &PriorityFill { n: 2 }, &lattice).unwrap();
        assert_eq!(g.entry(3, 2), 2.0 * sys.mu_n[0] + sys.gamma_n[0]);
        assert_eq!(g.entry(6, 6), -g.outflow()[6]);
    }

    #[test]
    fn rejects_small_box() {
        let sys = reference(100);
        let lattice = LatticeBox::new(vec![40, 80]).unwrap();
        assert!(matches!(
            build_generator(&sys, &PriorityFill { n: 100 }, &lattice),
            Err(Error::BoxTooSmall(_))
        ));
    }

    #[test]
    fn constant_tilt_entropy_closed_form() {
        let sys = reference(25);
        let v = TiltValue {
            phi: vec![2.0, 2.0],
            psi: vec![1.0, 1.0],
            varphi: vec![1.0, 1.0],
        };
        let trace = [TiltSegment { duration: 3.0, value: v.clone() }];
        let expected: f64 = sys.lambda_n.iter().map(|l| l * (2.0 * 2f64.ln() - 1.0)).sum();
        assert_relative_eq!(entropy_cost(&trace, &sys).unwrap(), expected, epsilon = 1e-14);
        let id = [TiltSegment { duration: 1.0, value: TiltValue::identity(2) }];
        assert_eq!(entropy_cost(&id, &sys).unwrap(), 0.0);
        let mut bad = v;
        bad.psi[0] = 0.0;
        assert!(entropy_cost(&[TiltSegment { duration: 1.0, value: bad }], &sys).is_err());
    }

    #[test]
    fn table_tilt_accumulates_per_piece() {
        let sys = reference(16);
        let a = TiltValue { phi: vec![1.5, 1.0], psi: vec![1.0; 2], varphi: vec![1.0; 2] };
        let b = TiltValue { phi: vec![1.0; 2], psi: vec![0.8, 1.2], varphi: vec![1.0; 2] };
        let tilt = TiltControl::Table { breaks: vec![0.0, 2.0], values: vec![a.clone(), b.clone()] };
        let path =
            simulate_tilted(&sys, &PriorityFill { n: 16 }, &tilt, &[8, 8], 5.0, 9).unwrap();
        let expect = 2.0 * a.entropy_rate(&sys) + 3.0 * b.entropy_rate(&sys);
        assert_relative_eq!(path.total_entropy, expect, max_relative = 1e-13);
    }

    #[test]
    fn empty_system_path_is_constant() {
        let p = LimitParams::reference();
        let sys = SystemN::from_rates(&p, 4, vec![0.0; 2], vec![1.0; 2], vec![1.0; 2]).unwrap();
        let path = simulate(&sys, &PriorityFill { n: 4 }, &[0, 0], 10.0, 1).unwrap();
        assert_eq!(path.events(), 0);
        assert_eq!(path.total_cost, 0.0);
    }

    #[test]
    fn excursion_fixture() {
        let sys = reference(4);
        let v = MarkovControl::constant(SimplexControl::last(2), 1.0);
        let scp = scp_from_markov_control(&v, &sys).unwrap();
        let path = PathRecord {
            d: 2,
            horizon: 4.0,
            times: vec![0.0, 1.0, 2.5],
            states: vec![2, 2, 5, 0, 2, 2],
            allocations: vec![2, 2, 4, 0, 2, 2],
            clocks: vec![None, Some(Clock::Arrival(0)), Some(Clock::Service(0))],
            cost: vec![0.0; 3],
            entropy: vec![0.0; 3],
            total_cost: 0.0,
            total_entropy: 0.0,
        };
        let st = boundary_excursion_stats(&path, &scp).unwrap();
        assert_relative_eq!(st.fraction_outside, 1.5 / 4.0);
        assert_relative_eq!(st.delta1, 1.5 * 0.2 * 1.0 / 2.0);
        let inside = PathRecord {
            states: vec![2, 2, 3, 1, 2, 2],
            allocations: vec![2, 2, 3, 1, 2, 2],
            ..path
        };
        let st = boundary_excursion_stats(&inside, &scp).unwrap();
        assert_eq!(st, ExcursionStats::default());
    }
}
