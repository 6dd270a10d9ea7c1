//! Halfin-Whitt parameters, scaling maps, drift and running cost of the
//! limiting diffusion, action sets, and scheduling policies built from
//! Markov controls.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on `sum(rho) = 1` and on simplex sums.
pub const SUM_TOL: f64 = 1e-12;
/// Sums closer than this to an integer are snapped before rounding by `vartheta`.
pub const SNAP_TOL: f64 = 1e-9;

/// Limiting Halfin-Whitt parameter set.
///
/// `rho`, `ell` and `rho_hat` are derived on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitParams {
    pub lambda: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl LimitParams {
    pub fn new(
        lambda: Vec<f64>,
        lambda_hat: Vec<f64>,
        mu: Vec<f64>,
        mu_hat: Vec<f64>,
        gamma: Vec<f64>,
        kappa: Vec<f64>,
    ) -> Result<Self> {
        let p = LimitParams {
            lambda,
            lambda_hat,
            mu,
            mu_hat,
            gamma,
            kappa,
        };
        p.validate()?;
        Ok(p)
    }

    /// Two-class reference instance used by the experiments: rho = (1/2, 1/2),
    /// no second-order terms, unequal patience, small holding costs.
    pub fn reference() -> Self {
        LimitParams {
            lambda: vec![0.5, 0.5],
            lambda_hat: vec![0.0, 0.0],
            mu: vec![1.0, 1.0],
            mu_hat: vec![0.0, 0.0],
            gamma: vec![0.5, 1.0],
            kappa: vec![0.2, 0.4],
        }
    }

    /// Same instance with cost weights replaced.
    pub fn with_kappa(&self, kappa: Vec<f64>) -> Result<Self> {
        let mut p = self.clone();
        p.kappa = kappa;
        p.validate()?;
        Ok(p)
    }

    /// Reorders the classes: class `i` of the result is class `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Error::check_dim(self.d(), perm.len())?;
        let pick = |v: &Vec<f64>| perm.iter().map(|&j| v[j]).collect::<Vec<_>>();
        LimitParams::new(
            pick(&self.lambda),
            pick(&self.lambda_hat),
            pick(&self.mu),
            pick(&self.mu_hat),
            pick(&self.gamma),
            pick(&self.kappa),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lambda.len();
        if d == 0 {
            return Err(Error::params("at least one class is required"));
        }
        for (name, v) in [
            ("lambda_hat", &self.lambda_hat),
            ("mu", &self.mu),
            ("mu_hat", &self.mu_hat),
            ("gamma", &self.gamma),
            ("kappa", &self.kappa),
        ] {
            if v.len() != d {
                return Err(Error::params(format!(
                    "{name} has {} entries, expected {d}",
                    v.len()
                )));
            }
        }
        let all = [
            &self.lambda,
            &self.lambda_hat,
            &self.mu,
            &self.mu_hat,
            &self.gamma,
            &self.kappa,
        ];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::params("parameters must be finite"));
        }
        for (name, v) in [("lambda", &self.lambda), ("mu", &self.mu), ("gamma", &self.gamma)] {
            if v.iter().any(|&x| x <= 0.0) {
                return Err(Error::params(format!("{name} must be strictly positive")));
            }
        }
        if self.kappa.iter().any(|&k| k < 0.0) {
            return Err(Error::params("kappa must be nonnegative"));
        }
        let total: f64 = self.rho().iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::params(format!(
                "sum of rho_i = lambda_i/mu_i must be 1, got {total}"
            )));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.lambda.len()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.lambda.iter().zip(&self.mu).map(|(l, m)| l / m).collect()
    }

    pub fn ell(&self) -> Vec<f64> {
        let rho = self.rho();
        (0..self.d())
            .map(|i| (self.lambda_hat[i] - rho[i] * self.mu_hat[i]) / self.mu[i])
            .collect()
    }

    pub fn rho_hat(&self) -> f64 {
        let rho = self.rho();
        (0..self.d())
            .map(|i| (rho[i] * self.mu_hat[i] - self.lambda_hat[i]) / self.mu[i])
            .sum()
    }

    /// Diagonal of the diffusion matrix, `Sigma = diag(sqrt(2 lambda_i))`.
    pub fn sigma(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| (2.0 * l).sqrt()).collect()
    }

    /// Loads a parameter set from the `[params]` table of a TOML document, or
    /// from a document holding the parameter keys at top level.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wrapped {
            params: LimitParams,
        }
        let p = match toml::from_str::<Wrapped>(text) {
            Ok(w) => w.params,
            Err(_) => toml::from_str::<LimitParams>(text).map_err(|e| Error::Config(e.to_string()))?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Serializes as a `[params]` table. Floats are written in shortest
    /// round-trip form, so loading the output reproduces `self` exactly.
    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Wrapped<'a> {
            params: &'a LimitParams,
        }
        toml::to_string(&Wrapped { params: self }).expect("plain float tables always serialize")
    }
}

/// Finite-n rates of the n-th system in the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemN {
    pub n: u32,
    pub lambda_n: Vec<f64>,
    pub mu_n: Vec<f64>,
    pub gamma_n: Vec<f64>,
    pub ell_n: Vec<f64>,
    /// Limiting load split, copied from the parameters the system was built from.
    pub rho: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl SystemN {
    /// Canonical embedding: `lambda^n = n lambda + sqrt(n) lambda_hat`,
    /// `mu^n = mu + mu_hat / sqrt(n)`, `gamma^n = gamma`. Gives `ell^n_i = mu_i ell_i`,
    /// which is `ell` for unit service rates.
    pub fn canonical(p: &LimitParams, n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::params("server count n must be positive"));
        }
        let nf = n as f64;
        let sn = nf.sqrt();
        let lambda_n: Vec<f64> = (0..p.d())
            .map(|i| nf * p.lambda[i] + sn * p.lambda_hat[i])
            .collect();
        let mu_n: Vec<f64> = (0..p.d()).map(|i| p.mu[i] + p.mu_hat[i] / sn).collect();
        if lambda_n.iter().chain(&mu_n).any(|&r| r <= 0.0) {
            return Err(Error::params(format!(
                "n = {n} gives a nonpositive arrival or service rate"
            )));
        }
        Self::from_rates(p, n, lambda_n, mu_n, p.gamma.clone())
    }

    /// Arbitrary nonnegative finite-n rates; `ell^n` is computed from its
    /// defining formula.
    pub fn from_rates(
        p: &LimitParams,
        n: u32,
        lambda_n: Vec<f64>,
        mu_n: Vec<f64>,
        gamma_n: Vec<f64>,
    ) -> Result<Self> {
        let d = p.d();
        for v in [&lambda_n, &mu_n, &gamma_n] {
            Error::check_dim(d, v.len())?;
            if v.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
                return Err(Error::params("finite-n rates must be finite and nonnegative"));
            }
        }
        if n == 0 {
            return Err(Error::params("server count n must be positive"));
        }
        let nf = n as f64;
        let sn = nf.sqrt();
        let rho = p.rho();
        let ell_n = (0..d)
            .map(|i| (lambda_n[i] - nf * p.lambda[i]) / sn - rho[i] * sn * (mu_n[i] - p.mu[i]))
            .collect();
        Ok(SystemN {
            n,
            lambda_n,
            mu_n,
            gamma_n,
            ell_n,
            rho,
            kappa: p.kappa.clone(),
        })
    }

    pub fn d(&self) -> usize {
        self.rho.len()
    }

    pub fn sqrt_n(&self) -> f64 {
        (self.n as f64).sqrt()
    }

    /// Lattice state closest to `n rho`.
    pub fn center(&self) -> Vec<u32> {
        let nf = self.n as f64;
        self.rho.iter().map(|r| (nf * r).round() as u32).collect()
    }

    /// Diffusion-scaled running cost `kappa . q / sqrt(n)` of an allocation.
    pub fn queue_cost(&self, x: &[u32], z: &[u32]) -> f64 {
        let s: f64 = (0..x.len())
            .map(|i| self.kappa[i] * (x[i] - z[i]) as f64)
            .sum();
        s / self.sqrt_n()
    }
}

/// Headcount per class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatticeState(pub Vec<u32>);

/// Servers per class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Allocation(pub Vec<u32>);

impl Allocation {
    pub fn queues(&self, x: &LatticeState) -> Vec<u32> {
        x.0.iter().zip(&self.0).map(|(a, b)| a - b).collect()
    }
}

/// A point of the simplex `{u >= 0, e.u = 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexControl(Vec<f64>);

impl SimplexControl {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::params("empty control"));
        }
        if u.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::params(format!("control {u:?} has a negative entry")));
        }
        let s: f64 = u.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::params(format!("control {u:?} sums to {s}, not 1")));
        }
        Ok(SimplexControl(u))
    }

    /// Vertex `e_i` of the `d`-simplex.
    pub fn vertex(d: usize, i: usize) -> Self {
        let mut u = vec![0.0; d];
        u[i] = 1.0;
        SimplexControl(u)
    }

    /// `e_d`, the last vertex.
    pub fn last(d: usize) -> Self {
        Self::vertex(d, d - 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn d(&self) -> usize {
        self.0.len()
    }

    /// Convex combination `t * self + (1 - t) * other`.
    pub fn blend(&self, t: f64, other: &SimplexControl) -> SimplexControl {
        let mut u: Vec<f64> = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| t * a + (1.0 - t) * b)
            .collect();
        renormalize(&mut u);
        SimplexControl(u)
    }

    pub(crate) fn from_weights_unchecked(mut u: Vec<f64>) -> Self {
        renormalize(&mut u);
        SimplexControl(u)
    }
}

fn renormalize(u: &mut [f64]) {
    for x in u.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = u.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 0.0 {
        for x in u.iter_mut() {
            *x /= s;
        }
    }
}

type ControlFn = dyn Fn(&[f64]) -> SimplexControl + Send + Sync;

/// Stationary Markov control `v: R^d -> U`, frozen to `u0` outside the
/// Euclidean ball of radius `radius`.
#[derive(Clone)]
pub struct MarkovControl {
    inner: Arc<ControlFn>,
    u0: SimplexControl,
    radius: f64,
    continuous: bool,
}

impl fmt::Debug for MarkovControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkovControl")
            .field("u0", &self.u0)
            .field("radius", &self.radius)
            .field("continuous", &self.continuous)
            .finish_non_exhaustive()
    }
}

impl MarkovControl {
    pub fn new<F>(f: F, u0: SimplexControl, radius: f64, continuous: bool) -> Self
    where
        F: Fn(&[f64]) -> SimplexControl + Send + Sync + 'static,
    {
        MarkovControl {
            inner: Arc::new(f),
            u0,
            radius,
            continuous,
        }
    }

    /// `v(x) = u` everywhere; frozen radius `radius`.
    pub fn constant(u: SimplexControl, radius: f64) -> Self {
        let c = u.clone();
        MarkovControl::new(move |_| c.clone(), u, radius, true)
    }

    pub fn eval(&self, x: &[f64]) -> SimplexControl {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        if r2.sqrt() > self.radius {
            self.u0.clone()
        } else {
            (self.inner)(x)
        }
    }

    pub fn u0(&self) -> &SimplexControl {
        &self.u0
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    pub fn d(&self) -> usize {
        self.u0.d()
    }
}

fn pos_total(x: &[f64]) -> f64 {
    x.iter().sum::<f64>().max(0.0)
}

/// Drift of the limiting diffusion,
/// `b(x,u) = ell - R (x - (e.x)^+ u) - (e.x)^+ Gamma u`.
pub fn drift(x: &[f64], u: &SimplexControl, p: &LimitParams) -> Result<Vec<f64>> {
    let d = p.d();
    Error::check_dim(d, x.len())?;
    Error::check_dim(d, u.d())?;
    let mut out = vec![0.0; d];
    drift_into(x, u.as_slice(), p, &mut out);
    Ok(out)
}

pub(crate) fn drift_into(x: &[f64], u: &[f64], p: &LimitParams, out: &mut [f64]) {
    let s = pos_total(x);
    let ell = p.ell();
    for i in 0..x.len() {
        out[i] = ell[i] - p.mu[i] * (x[i] - s * u[i]) - s * p.gamma[i] * u[i];
    }
}

/// Running cost `r(x,u) = kappa . ((e.x)^+ u)`.
pub fn running_cost(x: &[f64], u: &SimplexControl, p: &LimitParams) -> Result<f64> {
    Error::check_dim(p.d(), x.len())?;
    Error::check_dim(p.d(), u.d())?;
    Ok(running_cost_raw(x, u.as_slice(), &p.kappa))
}

pub(crate) fn running_cost_raw(x: &[f64], u: &[f64], kappa: &[f64]) -> f64 {
    let s = pos_total(x);
    s * kappa.iter().zip(u).map(|(k, u)| k * u).sum::<f64>()
}

/// Membership in `A^n(x) = {z in Z_+^d : z <= x, e.z = (e.x) ^ n}`.
pub fn action_feasible(x: &LatticeState, z: &Allocation, n: u32) -> bool {
    feasible_raw(&x.0, &z.0, n)
}

pub(crate) fn feasible_raw(x: &[u32], z: &[u32], n: u32) -> bool {
    if x.len() != z.len() {
        return false;
    }
    if z.iter().zip(x).any(|(zi, xi)| zi > xi) {
        return false;
    }
    let ex: u64 = x.iter().map(|&v| v as u64).sum();
    let ez: u64 = z.iter().map(|&v| v as u64).sum();
    ez == ex.min(n as u64)
}

/// Scaled control `(xhat - zhat) / (e.xhat)^+`, or `e_d` when the scaled total
/// is not positive. Fails if the pair is not work-conserving (the result would
/// leave the simplex).
pub fn control_from_allocation(xhat: &[f64], zhat: &[f64]) -> Result<SimplexControl> {
    Error::check_dim(xhat.len(), zhat.len())?;
    let d = xhat.len();
    let s: f64 = xhat.iter().sum();
    // a full but empty-queue state scales to a sum of rounding size
    if s <= SNAP_TOL {
        return Ok(SimplexControl::last(d));
    }
    let u: Vec<f64> = xhat.iter().zip(zhat).map(|(x, z)| (x - z) / s).collect();
    let total: f64 = u.iter().sum();
    if (total - 1.0).abs() > 1e-9 || u.iter().any(|&v| v < -1e-12) {
        return Err(Error::params(format!(
            "allocation is not work-conserving: control {u:?} sums to {total}"
        )));
    }
    Ok(SimplexControl::from_weights_unchecked(u))
}

/// Rounding map onto the lattice: floors every coordinate and moves the total
/// fractional mass to the last one. Preserves the coordinate sum.
pub fn vartheta(z: &[f64]) -> Result<LatticeState> {
    if z.is_empty() {
        return Err(Error::params("empty vector"));
    }
    if z.iter().any(|&v| !(v >= -SNAP_TOL) || !v.is_finite()) {
        return Err(Error::params(format!("vartheta needs a nonnegative vector, got {z:?}")));
    }
    let total: f64 = z.iter().sum();
    let rounded = total.round();
    if (total - rounded).abs() >= SNAP_TOL {
        return Err(Error::NonIntegerSum { value: total });
    }
    let mut out: Vec<u32> = z.iter().map(|&v| v.max(0.0).floor() as u32).collect();
    let floor_sum: u64 = out.iter().map(|&v| v as u64).sum();
    let last = out.len() - 1;
    out[last] += (rounded as u64 - floor_sum) as u32;
    Ok(LatticeState(out))
}

/// `xhat_i = (x_i - n rho_i) / sqrt(n)`.
pub fn scale_state(x: &[u32], sys: &SystemN) -> Vec<f64> {
    let nf = sys.n as f64;
    let sn = sys.sqrt_n();
    x.iter()
        .zip(&sys.rho)
        .map(|(&xi, r)| (xi as f64 - nf * r) / sn)
        .collect()
}

pub(crate) fn scale_state_into(x: &[u32], sys: &SystemN, out: &mut [f64]) {
    let nf = sys.n as f64;
    let sn = sys.sqrt_n();
    for i in 0..x.len() {
        out[i] = (x[i] as f64 - nf * sys.rho[i]) / sn;
    }
}

/// Inverse of [`scale_state`] on lattice points (rounds to the nearest integer).
pub fn unscale_state(xhat: &[f64], sys: &SystemN) -> Vec<u32> {
    let nf = sys.n as f64;
    let sn = sys.sqrt_n();
    xhat.iter()
        .zip(&sys.rho)
        .map(|(&v, r)| (v * sn + nf * r).round().max(0.0) as u32)
        .collect()
}

/// A scheduling control policy: state-to-allocation map.
pub trait SchedulingPolicy: Send + Sync {
    /// Writes an allocation in `A^n(x)` into `z`.
    fn allocate(&self, x: &[u32], z: &mut [u32]);

    fn describe(&self) -> String;
}

/// Static priority fill `z_i = x_i ^ (n - sum_{j<i} x_j)^+` in class order.
#[derive(Debug, Clone)]
pub struct PriorityFill {
    pub n: u32,
}

pub(crate) fn priority_fill(x: &[u32], n: u32, z: &mut [u32]) {
    let mut used: u64 = 0;
    for i in 0..x.len() {
        let left = (n as u64).saturating_sub(used);
        z[i] = (x[i] as u64).min(left) as u32;
        used += x[i] as u64;
    }
}

impl SchedulingPolicy for PriorityFill {
    fn allocate(&self, x: &[u32], z: &mut [u32]) {
        priority_fill(x, self.n, z);
    }

    fn describe(&self) -> String {
        format!("priority-fill(n={})", self.n)
    }
}

/// Work-conserving policy derived from a Markov control: inside the box `R_n`
/// the queue is `vartheta((e.x - n)^+ v(xhat))`, outside it the priority fill.
#[derive(Debug, Clone)]
pub struct MarkovScp {
    control: MarkovControl,
    sys: SystemN,
    radius: f64,
}

impl MarkovScp {
    /// `R_n` membership: `max_i |x_i - rho_i n| <= K sqrt(n)`; ties belong to `R_n`.
    pub fn in_region(&self, x: &[u32]) -> bool {
        let nf = self.sys.n as f64;
        let bound = self.radius * self.sys.sqrt_n();
        x.iter()
            .zip(&self.sys.rho)
            .all(|(&xi, r)| (xi as f64 - r * nf).abs() <= bound * (1.0 + 1e-12))
    }

    fn region_queue(&self, x: &[u32]) -> Result<Vec<u32>> {
        let ex: u64 = x.iter().map(|&v| v as u64).sum();
        let excess = ex.saturating_sub(self.sys.n as u64) as f64;
        if excess == 0.0 {
            return Ok(vec![0; x.len()]);
        }
        let xhat = scale_state(x, &self.sys);
        let v = self.control.eval(&xhat);
        let target: Vec<f64> = v.as_slice().iter().map(|u| excess * u).collect();
        Ok(vartheta(&target)?.0)
    }

    pub fn control(&self) -> &MarkovControl {
        &self.control
    }

    pub fn system(&self) -> &SystemN {
        &self.sys
    }

    /// Queue vector `q^n(x) = vartheta((e.x - n)^+ v(xhat))` regardless of `R_n`.
    pub fn target_queue(&self, x: &[u32]) -> Vec<u32> {
        self.region_queue(x)
            .expect("sum of (e.x-n)^+ v is an integer up to rounding")
    }
}

impl SchedulingPolicy for MarkovScp {
    fn allocate(&self, x: &[u32], z: &mut [u32]) {
        if self.in_region(x) {
            let q = self.target_queue(x);
            for i in 0..x.len() {
                z[i] = x[i] - q[i];
            }
        } else {
            priority_fill(x, self.sys.n, z);
        }
    }

    fn describe(&self) -> String {
        format!("markov-scp(n={}, K={})", self.sys.n, self.radius)
    }
}

/// Builds the scheduling policy of a frozen Markov control and verifies it on
/// every lattice point of `R_n` (outside `R_n` the priority fill is always
/// feasible). An infeasible point means `n` is too small for the control's
/// frozen radius.
pub fn scp_from_markov_control(v: &MarkovControl, sys: &SystemN) -> Result<MarkovScp> {
    Error::check_dim(sys.d(), v.d())?;
    let scp = MarkovScp {
        control: v.clone(),
        sys: sys.clone(),
        radius: v.radius(),
    };
    let nf = sys.n as f64;
    let half = v.radius() * sys.sqrt_n() * (1.0 + 1e-12);
    let ranges: Vec<(u32, u32)> = sys
        .rho
        .iter()
        .map(|r| {
            let lo = (r * nf - half).ceil().max(0.0) as u32;
            let hi = (r * nf + half).floor().max(0.0) as u32;
            (lo, hi)
        })
        .collect();
    let mut x: Vec<u32> = ranges.iter().map(|r| r.0).collect();
    let d = x.len();
    loop {
        if scp.in_region(&x) {
            let q = scp.region_queue(&x)?;
            if let Some(i) = (0..d).find(|&i| q[i] > x[i]) {
                return Err(Error::Infeasible {
                    state: x.clone(),
                    reason: format!(
                        "queue {} exceeds headcount {} in class {} (n = {} too small for K = {})",
                        q[i],
                        x[i],
                        i + 1,
                        sys.n,
                        v.radius()
                    ),
                });
            }
        }
        // odometer increment
        let mut k = d;
        loop {
            if k == 0 {
                return Ok(scp);
            }
            k -= 1;
            if x[k] < ranges[k].1 {
                x[k] += 1;
                for j in k + 1..d {
                    x[j] = ranges[j].0;
                }
                break;
            }
        }
    }
}
