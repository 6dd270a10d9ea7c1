//! Entropy function of Poisson tilts, Monte Carlo certifiers for the Brownian
//! and Poisson variational representations of exponential functionals, the
//! closed-form linear FCLT check, and diffusion simulators with a drift tilt.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::ctmc::{Accum, TiltControl, TiltValue};
use crate::model::{drift_into, running_cost_raw, scale_state, LimitParams, MarkovControl, SystemN};
use crate::par::Execution;
use crate::rng;
use crate::{Error, Result};

/// `k(r) = r ln r - r + 1` for `r >= 0`, with `k(0) = 1`.
pub fn varkappa(r: f64) -> f64 {
    let e = r - 1.0;
    if e.abs() < 0.1 {
        kappa_near_one(e)
    } else if r == 0.0 {
        1.0
    } else {
        r * r.ln() - e
    }
}

/// Checked variant of [`varkappa`].
pub fn try_varkappa(r: f64) -> Result<f64> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::Domain {
            function: "varkappa",
            value: r,
        });
    }
    Ok(varkappa(r))
}

/// `k(1 + e)` by its power series, accurate to a few ulps for `|e| < 0.1`.
fn kappa_near_one(e: f64) -> f64 {
    e * e * series_tail(e, 2)
}

/// `sum_{k >= k0} (-e)^(k-2) / (k (k-1))`, so that `k(1+e) = e^2 * series_tail(e, 2)`.
fn series_tail(e: f64, k0: u32) -> f64 {
    let mut sum = 0.0;
    let mut pow = 1.0;
    for k in 2..40u32 {
        if k >= k0 {
            let kf = k as f64;
            sum += pow / (kf * (kf - 1.0));
        }
        pow *= -e;
        if pow.abs() < 1e-18 {
            break;
        }
    }
    sum
}

/// Evaluates `k(1+r) >= r^2/2` (for `-1 < r <= 0`) and
/// `k(1+r) >= r^2 / (2(1+l))` (for `0 <= r < l`). An inequality whose domain
/// excludes `r` is reported as holding.
pub fn varkappa_lower_bounds(r: f64, l: f64) -> (bool, bool) {
    let first = if r > -1.0 && r <= 0.0 {
        if r > -0.1 {
            // difference equals r^2 * sum_{k>=3} |r|^(k-2)/(k(k-1)) >= 0
            r * r * series_tail(r, 3) >= 0.0
        } else {
            varkappa(1.0 + r) >= 0.5 * r * r
        }
    } else {
        true
    };
    let second = if r >= 0.0 && r < l {
        varkappa(1.0 + r) >= r * r / (2.0 * (1.0 + l))
    } else {
        true
    };
    (first, second)
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        McEstimate {
            estimate: mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// `(1/T) log mean exp(T G)` with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Largest single-replication share of the exponential mass.
    pub top_share: f64,
    /// `top_share > 0.2`.
    pub heavy_tail: bool,
}

/// Direct estimate from samples of `T G`.
pub fn log_mean_exp(tg: &[f64], horizon: f64) -> DirectEstimate {
    let n = tg.len() as f64;
    let m = tg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = tg.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    let mean = sum / n;
    let var = if tg.len() > 1 {
        e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let top_share = e.iter().cloned().fold(0.0, f64::max) / sum;
    DirectEstimate {
        estimate: (m + mean.ln()) / horizon,
        stderr: (var / n).sqrt() / mean / horizon,
        top_share,
        heavy_tail: top_share > 0.2,
    }
}

/// One row of a certificate battery.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub tilt_id: String,
    pub estimate: f64,
    pub stderr: f64,
    pub direct: f64,
    pub direct_stderr: f64,
    pub heavy_tail: bool,
    /// `estimate <= direct + 3 sqrt(stderr^2 + direct_stderr^2)`.
    pub verdict: bool,
}

impl Certificate {
    pub fn new(tilt_id: impl Into<String>, lower: McEstimate, direct: DirectEstimate) -> Self {
        let combined = (lower.stderr.powi(2) + direct.stderr.powi(2)).sqrt();
        Certificate {
            tilt_id: tilt_id.into(),
            estimate: lower.estimate,
            stderr: lower.stderr,
            direct: direct.estimate,
            direct_stderr: direct.stderr,
            heavy_tail: direct.heavy_tail,
            verdict: lower.estimate <= direct.estimate + 3.0 * combined,
        }
    }

    /// Structured text, one `{...}` record per line.
    pub fn write_records<W: Write>(certs: &[Certificate], mut w: W) -> std::io::Result<()> {
        for c in certs {
            writeln!(
                w,
                "{{tilt_id = {:?}, estimate = {:.16e}, stderr = {:.16e}, direct = {:.16e}, direct_stderr = {:.16e}, heavy_tail = {}, verdict = {}}}",
                c.tilt_id, c.estimate, c.stderr, c.direct, c.direct_stderr, c.heavy_tail,
                if c.verdict { "pass" } else { "fail" }
            )?;
        }
        Ok(())
    }
}

/// Replication count, seed and execution mode of a Monte Carlo run.
#[derive(Debug, Clone, Copy)]
pub struct McOptions {
    pub replications: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl McOptions {
    pub fn new(replications: usize, seed: u64) -> Self {
        McOptions {
            replications,
            seed,
            exec: Execution::default(),
        }
    }
}

/// Uniform time mesh for Brownian paths on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    pub horizon: f64,
    pub steps: usize,
    pub d: usize,
}

impl Mesh {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// A path sampled on a [`Mesh`]: `steps + 1` points of dimension `d`.
#[derive(Debug, Clone, Copy)]
pub struct MeshPath<'a> {
    pub dt: f64,
    pub d: usize,
    pub values: &'a [f64],
}

impl<'a> MeshPath<'a> {
    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, k: usize) -> &'a [f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    pub fn terminal(&self) -> &'a [f64] {
        self.at(self.len() - 1)
    }
}

type MeshFn = dyn Fn(&MeshPath<'_>) -> f64 + Send + Sync;

/// Path functional clipped to `[-clip, clip]`.
#[derive(Clone)]
pub struct PathFunctional {
    f: Arc<MeshFn>,
    pub clip: f64,
}

impl fmt::Debug for PathFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PathFunctional").field("clip", &self.clip).finish_non_exhaustive()
    }
}

impl PathFunctional {
    pub fn new<F>(f: F, clip: f64) -> Self
    where
        F: Fn(&MeshPath<'_>) -> f64 + Send + Sync + 'static,
    {
        PathFunctional { f: Arc::new(f), clip }
    }

    pub fn eval(&self, path: &MeshPath<'_>) -> f64 {
        (self.f)(path).clamp(-self.clip, self.clip)
    }
}

type DriftFeedback = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Drift tilt `w` of a Brownian motion.
#[derive(Clone)]
pub enum BrownianTilt {
    Zero,
    Constant(Vec<f64>),
    /// `values[k]` applies on `[k dt, (k+1) dt)`, the last one thereafter.
    Table { dt: f64, values: Vec<Vec<f64>> },
    /// `w_t = f(t, X_t)`, evaluated at the left end of each mesh step.
    Feedback(Arc<DriftFeedback>),
}

impl fmt::Debug for BrownianTilt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BrownianTilt::Zero => write!(f, "Zero"),
            BrownianTilt::Constant(w) => f.debug_tuple("Constant").field(w).finish(),
            BrownianTilt::Table { dt, values } => f
                .debug_struct("Table")
                .field("dt", dt)
                .field("values", values)
                .finish(),
            BrownianTilt::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

impl BrownianTilt {
    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        BrownianTilt::Feedback(Arc::new(f))
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            BrownianTilt::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            BrownianTilt::Constant(w) => out.copy_from_slice(w),
            BrownianTilt::Table { dt, values } => {
                let k = ((t / dt + 1e-9).floor() as usize).min(values.len() - 1);
                out.copy_from_slice(&values[k]);
            }
            BrownianTilt::Feedback(f) => f(t, x, out),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        match self {
            BrownianTilt::Constant(w) => Error::check_dim(d, w.len()),
            BrownianTilt::Table { dt, values } => {
                if values.is_empty() || !(*dt > 0.0) {
                    return Err(Error::params("tilt table needs a positive step and values"));
                }
                values.iter().try_for_each(|v| Error::check_dim(d, v.len()))
            }
            _ => Ok(()),
        }
    }
}

/// Euler-Maruyama path with its running-cost and tilt-energy integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPath {
    pub dt: f64,
    pub d: usize,
    /// `steps + 1` states, flattened.
    pub states: Vec<f64>,
    /// Trapezoidal `int r(X, v(X)) dt`.
    pub cost: f64,
    /// `sum_k |w_k|^2 dt / 2`, the exact relative entropy of the discrete tilt.
    pub energy: f64,
}

impl DiffusionPath {
    pub fn steps(&self) -> usize {
        self.states.len() / self.d - 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.d..(k + 1) * self.d]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.steps())
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps() as f64
    }
}

/// Euler-Maruyama for `dX = (drift(X) + sigma w) dt + sigma dW` with diagonal
/// `sigma`; `cost(X)` is integrated by the trapezoidal rule.
#[allow(clippy::too_many_arguments)]
pub fn simulate_sde(
    drift: &dyn Fn(&[f64], &mut [f64]),
    cost: &dyn Fn(&[f64]) -> f64,
    sigma: &[f64],
    w: &BrownianTilt,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<DiffusionPath> {
    let d = sigma.len();
    Error::check_dim(d, x0.len())?;
    w.check(d)?;
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::params("time step and horizon must be positive"));
    }
    let steps = (horizon / dt).round().max(1.0) as usize;
    let mut rng = rng::stream(seed, 0);
    let sq = dt.sqrt();
    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    let mut wv = vec![0.0; d];
    let mut energy = Accum::default();
    let mut integral = Accum::default();
    let mut c_prev = cost(&x);
    for k in 0..steps {
        let t = k as f64 * dt;
        drift(&x, &mut b);
        w.eval(t, &x, &mut wv);
        energy.add(0.5 * wv.iter().map(|v| v * v).sum::<f64>() * dt);
        for i in 0..d {
            let xi: f64 = rng.sample(StandardNormal);
            x[i] += (b[i] + sigma[i] * wv[i]) * dt + sigma[i] * sq * xi;
        }
        states.extend_from_slice(&x);
        let c = cost(&x);
        integral.add(0.5 * (c_prev + c) * dt);
        c_prev = c;
    }
    Ok(DiffusionPath {
        dt,
        d,
        states,
        cost: integral.value(),
        energy: energy.value(),
    })
}

/// Path of the controlled diffusion `dX = b(X, v(X)) dt + Sigma dW`.
pub fn simulate_diffusion(
    v: &MarkovControl,
    p: &LimitParams,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<DiffusionPath> {
    simulate_extended_diffusion(v, &BrownianTilt::Zero, p, x0, horizon, dt, seed)
}

/// Path of `dX = b(X, v(X)) dt + Sigma w dt + Sigma dW`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_extended_diffusion(
    v: &MarkovControl,
    w: &BrownianTilt,
    p: &LimitParams,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<DiffusionPath> {
    Error::check_dim(p.d(), v.d())?;
    let drift = |x: &[f64], out: &mut [f64]| {
        let u = v.eval(x);
        drift_into(x, u.as_slice(), p, out);
    };
    let cost = |x: &[f64]| running_cost_raw(x, v.eval(x).as_slice(), &p.kappa);
    simulate_sde(&drift, &cost, &p.sigma(), w, x0, horizon, dt, seed)
}

/// Brownian path `W + int w` on a mesh, returning the tilt energy.
fn tilted_brownian(w: &BrownianTilt, mesh: &Mesh, rng: &mut ChaCha8Rng, buf: &mut Vec<f64>) -> f64 {
    let d = mesh.d;
    let dt = mesh.dt();
    let sq = dt.sqrt();
    buf.clear();
    buf.resize(d, 0.0);
    let mut wv = vec![0.0; d];
    let mut energy = Accum::default();
    for k in 0..mesh.steps {
        let t = k as f64 * dt;
        let base = k * d;
        let x: Vec<f64> = buf[base..base + d].to_vec();
        w.eval(t, &x, &mut wv);
        energy.add(0.5 * wv.iter().map(|v| v * v).sum::<f64>() * dt);
        for i in 0..d {
            let xi: f64 = rng.sample(StandardNormal);
            buf.push(x[i] + wv[i] * dt + sq * xi);
        }
    }
    energy.value()
}

/// Monte Carlo estimate of `E[G(W + int w) - (1/2T) int |w|^2]`, a lower bound
/// on `(1/T) log E[exp(T G(W))]` for every tilt.
pub fn bm_lower_bound_certificate(
    g: &PathFunctional,
    w: &BrownianTilt,
    mesh: &Mesh,
    mc: &McOptions,
) -> Result<McEstimate> {
    w.check(mesh.d)?;
    let samples = mc.exec.map(mc.replications, |r| {
        let mut rng = rng::stream(rng::derive_seed(mc.seed, r as u64), 0);
        let mut buf = Vec::new();
        let energy = tilted_brownian(w, mesh, &mut rng, &mut buf);
        let path = MeshPath {
            dt: mesh.dt(),
            d: mesh.d,
            values: &buf,
        };
        g.eval(&path) - energy / mesh.horizon
    });
    Ok(McEstimate::from_samples(&samples))
}

/// Direct estimate of `(1/T) log E[exp(T G(W))]`.
pub fn bm_direct_log_mgf(g: &PathFunctional, mesh: &Mesh, mc: &McOptions) -> DirectEstimate {
    let tg = mc.exec.map(mc.replications, |r| {
        let mut rng = rng::stream(rng::derive_seed(mc.seed, r as u64), 0);
        let mut buf = Vec::new();
        tilted_brownian(&BrownianTilt::Zero, mesh, &mut rng, &mut buf);
        let path = MeshPath {
            dt: mesh.dt(),
            d: mesh.d,
            values: &buf,
        };
        mesh.horizon * g.eval(&path)
    });
    log_mean_exp(&tg, mesh.horizon)
}

type CountFn = dyn Fn(&[f64], f64) -> f64 + Send + Sync;

/// Functional of a counting path (its jump times on `[0, T]`), clipped to
/// `[-clip, clip]`.
#[derive(Clone)]
pub struct CountFunctional {
    f: Arc<CountFn>,
    pub clip: f64,
}

impl fmt::Debug for CountFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CountFunctional").field("clip", &self.clip).finish_non_exhaustive()
    }
}

impl CountFunctional {
    pub fn new<F>(f: F, clip: f64) -> Self
    where
        F: Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    {
        CountFunctional { f: Arc::new(f), clip }
    }

    pub fn eval(&self, jumps: &[f64], horizon: f64) -> f64 {
        (self.f)(jumps, horizon).clamp(-self.clip, self.clip)
    }
}

type CountFeedback = dyn Fn(f64, usize) -> f64 + Send + Sync;

/// Intensity multiplier of a Poisson process.
#[derive(Clone)]
pub enum PoissonTilt {
    Constant(f64),
    /// `values[k]` applies on `[k dt, (k+1) dt)`, the last one thereafter.
    Table { dt: f64, values: Vec<f64> },
    /// `phi = f(t, count)`, held fixed until the next jump or `max_hold` time units.
    Feedback { f: Arc<CountFeedback>, max_hold: f64 },
}

impl fmt::Debug for PoissonTilt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoissonTilt::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            PoissonTilt::Table { dt, values } => f
                .debug_struct("Table")
                .field("dt", dt)
                .field("values", values)
                .finish(),
            PoissonTilt::Feedback { max_hold, .. } => {
                f.debug_struct("Feedback").field("max_hold", max_hold).finish_non_exhaustive()
            }
        }
    }
}

impl PoissonTilt {
    /// Multiplier at `(t, count)` and the time until which it stays fixed.
    fn piece(&self, t: f64, count: usize) -> (f64, f64) {
        match self {
            PoissonTilt::Constant(c) => (*c, f64::INFINITY),
            PoissonTilt::Table { dt, values } => {
                let k = (t / dt + 1e-12).floor() as usize;
                if k + 1 >= values.len() {
                    (values[values.len() - 1], f64::INFINITY)
                } else {
                    (values[k], (k + 1) as f64 * dt)
                }
            }
            PoissonTilt::Feedback { f, max_hold } => (f(t, count), t + max_hold),
        }
    }
}

/// Poisson path with intensity `rate * phi`; returns jump times and
/// `int k(phi) dt`.
fn tilted_poisson(
    tilt: &PoissonTilt,
    rate: f64,
    horizon: f64,
    rng: &mut ChaCha8Rng,
    jumps: &mut Vec<f64>,
) -> Result<f64> {
    jumps.clear();
    let mut t = 0.0;
    let mut ent = Accum::default();
    while t < horizon {
        let (phi, until) = tilt.piece(t, jumps.len());
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::TiltNonPositive {
                value: phi,
                clock: "poisson".into(),
                time: t,
            });
        }
        let end = until.min(horizon);
        let e: f64 = rng.sample(Exp1);
        let next = t + e / (rate * phi);
        if next < end {
            ent.add(varkappa(phi) * (next - t));
            jumps.push(next);
            t = next;
        } else {
            // memoryless: discard the draw and restart at the piece end
            ent.add(varkappa(phi) * (end - t));
            t = end;
        }
    }
    Ok(ent.value())
}

/// Monte Carlo estimate of `E[G(N^phi)] - (rate/T) int k(phi)`.
pub fn poisson_lower_bound_certificate(
    g: &CountFunctional,
    tilt: &PoissonTilt,
    rate: f64,
    horizon: f64,
    mc: &McOptions,
) -> Result<McEstimate> {
    if let PoissonTilt::Constant(c) = tilt {
        if !(*c > 0.0) {
            return Err(Error::TiltNonPositive {
                value: *c,
                clock: "poisson".into(),
                time: 0.0,
            });
        }
    }
    let samples = mc.exec.map(mc.replications, |r| {
        let mut rng = rng::stream(rng::derive_seed(mc.seed, r as u64), 0);
        let mut jumps = Vec::new();
        let ent = tilted_poisson(tilt, rate, horizon, &mut rng, &mut jumps)?;
        Ok(g.eval(&jumps, horizon) - rate * ent / horizon)
    });
    let samples: Result<Vec<f64>> = samples.into_iter().collect();
    Ok(McEstimate::from_samples(&samples?))
}

/// Direct estimate of `(1/T) log E[exp(T G(N))]`.
pub fn poisson_direct_log_mgf(
    g: &CountFunctional,
    rate: f64,
    horizon: f64,
    mc: &McOptions,
) -> DirectEstimate {
    let tg = mc.exec.map(mc.replications, |r| {
        let mut rng = rng::stream(rng::derive_seed(mc.seed, r as u64), 0);
        let mut jumps = Vec::new();
        tilted_poisson(&PoissonTilt::Constant(1.0), rate, horizon, &mut rng, &mut jumps)
            .expect("unit tilt is positive");
        horizon * g.eval(&jumps, horizon)
    });
    log_mean_exp(&tg, horizon)
}

/// Both sides of the linear-terminal FCLT identity and the Taylor bound on
/// their gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcltCheck {
    /// `(1/T) log E[exp(c N^n_T)] = lambda n (e^{c/sqrt n} - 1) - lambda sqrt(n) c`.
    pub poisson_side: f64,
    /// `lambda c^2 / 2`.
    pub bm_side: f64,
    /// `lambda |c|^3 e^{|c|/sqrt n} / (6 sqrt n)`.
    pub bound: f64,
    pub holds: bool,
}

impl FcltCheck {
    pub fn gap(&self) -> f64 {
        (self.poisson_side - self.bm_side).abs()
    }
}

/// Closed-form check for `G(N) = c N_T / T` applied to the centered, scaled
/// Poisson process `(N_{nt} - lambda n t)/sqrt(n)`. Both sides are independent
/// of the horizon.
pub fn fclt_linear_check(c: f64, lambda: f64, n: f64, horizon: f64) -> Result<FcltCheck> {
    if !(n >= 1.0) || !(lambda > 0.0) || !(horizon > 0.0) || !c.is_finite() {
        return Err(Error::params("fclt check needs n >= 1, lambda > 0, T > 0"));
    }
    let sn = n.sqrt();
    let poisson_side = lambda * n * (c / sn).exp_m1() - lambda * sn * c;
    let bm_side = 0.5 * lambda * c * c;
    let bound = lambda * c.abs().powi(3) * (c.abs() / sn).exp() / (6.0 * sn);
    Ok(FcltCheck {
        poisson_side,
        bm_side,
        bound,
        holds: (poisson_side - bm_side).abs() <= bound,
    })
}

type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Vector field on the scaled state space with a known sup-norm bound.
#[derive(Clone)]
pub struct BoundedField {
    f: Arc<FieldFn>,
    pub sup_norm: f64,
    pub d: usize,
}

impl fmt::Debug for BoundedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundedField")
            .field("sup_norm", &self.sup_norm)
            .field("d", &self.d)
            .finish_non_exhaustive()
    }
}

impl BoundedField {
    pub fn new<F>(d: usize, sup_norm: f64, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        BoundedField {
            f: Arc::new(f),
            sup_norm,
            d,
        }
    }

    pub fn zero(d: usize) -> Self {
        BoundedField::new(d, 0.0, |_, out| out.iter_mut().for_each(|v| *v = 0.0))
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.eval_into(x, &mut out);
        out
    }
}

/// State-feedback tilt `phi = psi = e - w(xhat)/sqrt(n)`, `varphi = e`.
/// Requires `n > sup |w|^2`.
pub fn make_lowerbound_tilt(w: &BoundedField, sys: &SystemN) -> Result<TiltControl> {
    Error::check_dim(sys.d(), w.d)?;
    let nf = sys.n as f64;
    if !(nf > w.sup_norm * w.sup_norm) {
        return Err(Error::TiltNonPositive {
            value: 1.0 - w.sup_norm / sys.sqrt_n(),
            clock: format!("lower-bound tilt (n = {} <= sup|w|^2 = {})", sys.n, w.sup_norm * w.sup_norm),
            time: 0.0,
        });
    }
    let w = w.clone();
    let sys = sys.clone();
    Ok(TiltControl::feedback(move |x: &[u32], tv: &mut TiltValue| {
        let xhat = scale_state(x, &sys);
        w.eval_into(&xhat, &mut tv.phi);
        let sn = sys.sqrt_n();
        for i in 0..tv.phi.len() {
            let m = 1.0 - tv.phi[i] / sn;
            tv.phi[i] = m;
            tv.psi[i] = m;
            tv.varphi[i] = 1.0;
        }
    }))
}

/// `sum_i (lambda^n_i + n mu^n_i) k(1 - w_i/sqrt n)`, the entropy rate of the
/// lower-bound tilt at a state where the field equals `w`.
pub fn lowerbound_entropy_rate(w: &[f64], sys: &SystemN) -> f64 {
    let nf = sys.n as f64;
    let sn = sys.sqrt_n();
    (0..sys.d())
        .map(|i| (sys.lambda_n[i] + nf * sys.mu_n[i]) * varkappa(1.0 - w[i] / sn))
        .sum()
}

/// Limit `sum_i (lambda_i + mu_i) w_i^2 / 2` of [`lowerbound_entropy_rate`].
pub fn lowerbound_entropy_limit(w: &[f64], p: &LimitParams) -> f64 {
    (0..p.d())
        .map(|i| 0.5 * (p.lambda[i] + p.mu[i]) * w[i] * w[i])
        .sum()
}

/// Bound on `|lowerbound_entropy_rate - lowerbound_entropy_limit|` from the
/// cubic Taylor remainder of `k` plus the second-order rate corrections.
pub fn lowerbound_entropy_envelope(w: &[f64], sys: &SystemN, p: &LimitParams) -> f64 {
    let nf = sys.n as f64;
    let sn = sys.sqrt_n();
    (0..sys.d())
        .map(|i| {
            let r = (w[i] / sn).abs();
            let weight = sys.lambda_n[i] + nf * sys.mu_n[i];
            let cubic = weight * r.powi(3) / (6.0 * (1.0 - r).powi(2));
            let rates = ((sys.lambda_n[i] - nf * p.lambda[i]).abs()
                + nf * (sys.mu_n[i] - p.mu[i]).abs())
                * 0.5
                * w[i]
                * w[i]
                / nf;
            cubic + rates
        })
        .sum()
}

/// Piecewise-constant multiplier trace of the `n`-th system.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace {
    pub n: u32,
    pub durations: Vec<f64>,
    /// One multiplier vector per segment.
    pub multipliers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub n: u32,
    /// `(n/T) int sum_i k(phi_i)`.
    pub entropy: f64,
    /// `(1/T) int sum_i |sqrt(n)(1 - phi_i)|^2`.
    pub energy: f64,
    /// Largest upward deviation `max (phi - 1)^+`.
    pub eps: f64,
    /// `2 entropy (1 + eps)`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks `energy <= 2 entropy (1 + eps_n)` trace by trace; `eps_n` is the
/// largest upward deviation of the multipliers and vanishes for traces with
/// bounded `sqrt(n)(phi - 1)`.
pub fn entropy_to_energy_check(traces: &[EnergyTrace]) -> Result<Vec<EnergyRow>> {
    traces
        .iter()
        .map(|tr| {
            if tr.durations.len() != tr.multipliers.len() {
                return Err(Error::params("one multiplier vector per segment is required"));
            }
            let nf = tr.n as f64;
            let mut ent = Accum::default();
            let mut en = Accum::default();
            let mut horizon = Accum::default();
            let mut eps: f64 = 0.0;
            for (dt, m) in tr.durations.iter().zip(&tr.multipliers) {
                for &phi in m {
                    let k = try_varkappa(phi)?;
                    ent.add(nf * k * dt);
                    en.add(nf * (1.0 - phi).powi(2) * dt);
                    eps = eps.max(phi - 1.0);
                }
                horizon.add(*dt);
            }
            let t = horizon.value();
            if !(t > 0.0) {
                return Err(Error::params("trace must have positive duration"));
            }
            let entropy = ent.value() / t;
            let energy = en.value() / t;
            let bound = 2.0 * entropy * (1.0 + eps);
            Ok(EnergyRow {
                n: tr.n,
                entropy,
                energy,
                eps,
                bound,
                holds: energy <= bound,
            })
        })
        .collect()
}
