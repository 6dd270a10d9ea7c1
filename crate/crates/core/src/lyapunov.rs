//! Lyapunov function built from the convex C^2 profile `eta` and exhaustive
//! drift diagnostics of the pre-limit generator, optionally tilted, on an
//! annular shell of scaled states.

use std::io::Write;

use crate::ctmc::{LatticeBox, TiltControl, TiltValue};
use crate::model::{scale_state_into, SchedulingPolicy, SystemN};
use crate::par::Execution;
use crate::{Error, Result};

/// `-1/2` on `t <= -1`, `(t+1)^3 - (t+1)^4/2 - 1/2` on `[-1, 0]`, `t` on `t >= 0`.
pub fn eta(t: f64) -> f64 {
    if t <= -1.0 {
        -0.5
    } else if t <= 0.0 {
        let s = t + 1.0;
        s * s * s - 0.5 * s * s * s * s - 0.5
    } else {
        t
    }
}

pub fn eta_prime(t: f64) -> f64 {
    if t <= -1.0 {
        0.0
    } else if t <= 0.0 {
        let s = t + 1.0;
        3.0 * s * s - 2.0 * s * s * s
    } else {
        1.0
    }
}

pub fn eta_second(t: f64) -> f64 {
    if t <= -1.0 || t > 0.0 {
        0.0
    } else {
        let s = t + 1.0;
        6.0 * s - 6.0 * s * s
    }
}

/// `Z(x) = eps0 eps1 xi(-x) + eps0 xi(x)` with `xi(x) = sum_i eta(x_i) / mu_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovZ {
    pub eps0: f64,
    pub eps1: f64,
    pub mu: Vec<f64>,
}

impl LyapunovZ {
    pub fn new(eps0: f64, eps1: f64, mu: Vec<f64>) -> Result<Self> {
        if !(eps0 > 0.0 && eps1 > 0.0) {
            return Err(Error::params("eps0 and eps1 must be positive"));
        }
        if mu.is_empty() || mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::params("divisors must be positive"));
        }
        Ok(LyapunovZ { eps0, eps1, mu })
    }

    /// `eps0 = eps1 = 1`.
    pub fn with_mu(mu: Vec<f64>) -> Result<Self> {
        Self::new(1.0, 1.0, mu)
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn xi(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.mu).map(|(&t, m)| eta(t) / m).sum()
    }

    pub fn z(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mu)
            .map(|(&t, m)| (self.eps0 * self.eps1 * eta(-t) + self.eps0 * eta(t)) / m)
            .sum()
    }

    /// Change of `Z` when coordinate `i` moves by `step`.
    fn increment(&self, x: &[f64], i: usize, step: f64) -> f64 {
        let t = x[i];
        let f = |t: f64| self.eps0 * self.eps1 * eta(-t) + self.eps0 * eta(t);
        (f(t + step) - f(t)) / self.mu[i]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DriftOptions {
    /// Certificate `(c0, c1)` to check in addition to the fitted one.
    pub certificate: Option<(f64, f64)>,
    pub exec: Execution,
}

/// Exhaustive drift evaluation on the shell `inner <= |xhat| <= outer`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub n: u32,
    pub inner: f64,
    pub outer: f64,
    pub states: usize,
    /// Largest generator drift of `Z` on the shell.
    pub sup_drift: f64,
    /// Fitted decay rate (never negative).
    pub c1: f64,
    /// Smallest offset with `LZ <= c0 - c1 |xhat|` at every shell state.
    pub c0: f64,
    /// `max sqrt(n) |Z(xhat +- e_i/sqrt(n)) - Z(xhat)|` over the shell.
    pub increment_bound: f64,
    /// `LZ <= c0 - c1 |xhat|` verified state by state for the fitted pair.
    pub holds: bool,
    /// `max(LZ + c1 |xhat| - c0)` for the configured pair, when given.
    pub configured: Option<ConfiguredCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfiguredCheck {
    pub c0: f64,
    pub c1: f64,
    pub sup_excess: f64,
    pub holds: bool,
}

impl DriftReport {
    /// A decaying certificate was found.
    pub fn certified(&self) -> bool {
        self.holds && self.c1 > 0.0 && self.c0.is_finite()
    }

    /// `key = value` lines.
    pub fn write_certificate<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "n = {}", self.n)?;
        writeln!(w, "shell_inner = {:.16e}", self.inner)?;
        writeln!(w, "shell_outer = {:.16e}", self.outer)?;
        writeln!(w, "states = {}", self.states)?;
        writeln!(w, "sup_drift = {:.16e}", self.sup_drift)?;
        writeln!(w, "c0 = {:.16e}", self.c0)?;
        writeln!(w, "c1 = {:.16e}", self.c1)?;
        writeln!(w, "increment_bound = {:.16e}", self.increment_bound)?;
        writeln!(w, "holds = {}", self.holds)?;
        writeln!(w, "certified = {}", self.certified())?;
        if let Some(c) = &self.configured {
            writeln!(w, "configured_c0 = {:.16e}", c.c0)?;
            writeln!(w, "configured_c1 = {:.16e}", c.c1)?;
            writeln!(w, "configured_sup_excess = {:.16e}", c.sup_excess)?;
            writeln!(w, "configured_holds = {}", c.holds)?;
        }
        Ok(())
    }
}

const ANNULI: usize = 8;

/// Applies the (tilted) generator to `Z` at every lattice state whose scaled
/// norm lies in `[inner, outer]`. The decay rate is the negated least-squares
/// slope of the per-annulus maxima over eight equal annuli; the offset is then
/// the smallest one making the bound hold at every state.
#[allow(clippy::too_many_arguments)]
pub fn drift_report(
    sys: &SystemN,
    policy: &dyn SchedulingPolicy,
    tilt: &TiltControl,
    lattice: &LatticeBox,
    inner: f64,
    outer: f64,
    z: &LyapunovZ,
    opts: &DriftOptions,
) -> Result<DriftReport> {
    let d = sys.d();
    Error::check_dim(d, lattice.d())?;
    Error::check_dim(d, z.d())?;
    if !(inner > 0.0 && outer > inner) {
        return Err(Error::params("shell needs 0 < inner < outer"));
    }
    if let TiltControl::Table { .. } = tilt {
        return Err(Error::params("drift evaluation needs a time-homogeneous tilt"));
    }
    if let TiltControl::Constant(v) = tilt {
        for w in [&v.phi, &v.psi, &v.varphi] {
            Error::check_dim(d, w.len())?;
        }
    }
    let nf = sys.n as f64;
    let sn = sys.sqrt_n();
    for i in 0..d {
        if (lattice.upper()[i] as f64) < nf * sys.rho[i] + outer * sn {
            return Err(Error::BoxTooSmall(format!(
                "shell of radius {outer} leaves the box along axis {}",
                i + 1
            )));
        }
    }
    let step = 1.0 / sn;
    // (norm, LZ, increment) per shell state; NaN norm marks states off the shell
    let rows: Vec<(f64, f64, f64)> = opts.exec.map(lattice.len(), |idx| {
        let mut x = vec![0u32; d];
        lattice.state_into(idx, &mut x);
        let mut xh = vec![0.0; d];
        scale_state_into(&x, sys, &mut xh);
        let norm = xh.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < inner || norm > outer {
            return (f64::NAN, 0.0, 0.0);
        }
        let mut zalloc = vec![0u32; d];
        policy.allocate(&x, &mut zalloc);
        let mut tv = TiltValue::identity(d);
        match tilt {
            TiltControl::Constant(v) => tv = v.clone(),
            TiltControl::Feedback(f) => f(&x, &mut tv),
            _ => {}
        }
        let mut lz = 0.0;
        let mut inc = 0.0f64;
        for i in 0..d {
            let up = z.increment(&xh, i, step);
            let down = z.increment(&xh, i, -step);
            let q = (x[i] - zalloc[i]) as f64;
            lz += sys.lambda_n[i] * tv.phi[i] * up
                + (sys.mu_n[i] * zalloc[i] as f64 * tv.psi[i] + sys.gamma_n[i] * q * tv.varphi[i]) * down;
            inc = inc.max(up.abs() * sn).max(down.abs() * sn);
        }
        (norm, lz, inc)
    });
    let shell: Vec<(f64, f64, f64)> = rows.into_iter().filter(|r| !r.0.is_nan()).collect();
    if shell.is_empty() {
        return Err(Error::BoxTooSmall("shell contains no lattice states".into()));
    }
    let width = (outer - inner) / ANNULI as f64;
    let mut maxima = [f64::NEG_INFINITY; ANNULI];
    for &(s, y, _) in &shell {
        let k = (((s - inner) / width) as usize).min(ANNULI - 1);
        maxima[k] = maxima[k].max(y);
    }
    let pts: Vec<(f64, f64)> = maxima
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_finite())
        .map(|(k, &m)| (inner + (k as f64 + 0.5) * width, m))
        .collect();
    let slope = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let sx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let sy = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let num: f64 = pts.iter().map(|p| (p.0 - sx) * (p.1 - sy)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - sx) * (p.0 - sx)).sum();
        num / den
    } else {
        0.0
    };
    let c1 = (-slope).max(0.0);
    let c0 = shell.iter().map(|&(s, y, _)| y + c1 * s).fold(f64::NEG_INFINITY, f64::max);
    let holds = shell.iter().all(|&(s, y, _)| y <= c0 - c1 * s);
    let sup_drift = shell.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let increment_bound = shell.iter().map(|r| r.2).fold(0.0, f64::max);
    let configured = opts.certificate.map(|(a0, a1)| {
        let sup_excess = shell
            .iter()
            .map(|&(s, y, _)| y + a1 * s - a0)
            .fold(f64::NEG_INFINITY, f64::max);
        ConfiguredCheck {
            c0: a0,
            c1: a1,
            sup_excess,
            holds: sup_excess <= 0.0,
        }
    });
    Ok(DriftReport {
        n: sys.n,
        inner,
        outer,
        states: shell.len(),
        sup_drift,
        c1,
        c0,
        increment_bound,
        holds,
        configured,
    })
}
