//! Finite-difference solvers for the limiting diffusion: the risk-sensitive
//! HJB eigenvalue problem in log form, the truncated zero-sum game with a
//! ball-constrained maximizer, ground-control extraction, and continuous
//! near-optimal controls frozen outside a ball.
//!
//! Both solvers iterate on a frozen-control linear problem: given the current
//! log-eigenfunction, controls are selected pointwise from its central
//! gradient, and the resulting ergodic equation
//! `beta . grad Phi + sum_i lambda_i d_ii Phi + g = value` is solved exactly
//! with upwind drift, central diffusion, reflecting boundary and the
//! normalization `Phi(anchor) = 0`.

use std::io::Write;

use crate::linalg::BandMatrix;
use crate::model::{drift_into, running_cost_raw, LimitParams, MarkovControl, SimplexControl};
use crate::par::Execution;
use crate::variational::BoundedField;
use crate::{Error, Result};

/// Uniform tensor grid `x_i = -half_width_i + k h`, `k = 0..counts_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    half_width: Vec<f64>,
    h: f64,
    counts: Vec<usize>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(half_width: Vec<f64>, h: f64) -> Result<Self> {
        if half_width.is_empty() || !(h > 0.0) || half_width.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::params("grid needs positive extents and spacing"));
        }
        let counts: Vec<usize> = half_width
            .iter()
            .map(|&l| (2.0 * l / h + 1e-9).floor() as usize + 1)
            .collect();
        if counts.iter().any(|&c| c < 3) {
            return Err(Error::params("grid needs at least three nodes per axis"));
        }
        let d = counts.len();
        let mut strides = vec![1; d];
        for i in (0..d - 1).rev() {
            strides[i] = strides[i + 1] * counts[i + 1];
        }
        Ok(Grid {
            half_width,
            h,
            counts,
            strides,
        })
    }

    /// `[-half_width, half_width]^d`.
    pub fn cube(d: usize, half_width: f64, h: f64) -> Result<Self> {
        Self::new(vec![half_width; d], h)
    }

    pub fn d(&self) -> usize {
        self.counts.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn half_width(&self) -> &[f64] {
        &self.half_width
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.strides[0] * self.counts[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, i: usize) -> usize {
        self.strides[i]
    }

    pub fn axis_index(&self, s: usize, i: usize) -> usize {
        (s / self.strides[i]) % self.counts[i]
    }

    pub fn coord_into(&self, s: usize, out: &mut [f64]) {
        for i in 0..self.d() {
            out[i] = -self.half_width[i] + self.axis_index(s, i) as f64 * self.h;
        }
    }

    pub fn coord(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        self.coord_into(s, &mut out);
        out
    }

    pub fn is_boundary(&self, s: usize) -> bool {
        (0..self.d()).any(|i| {
            let k = self.axis_index(s, i);
            k == 0 || k + 1 == self.counts[i]
        })
    }

    /// Node closest to the origin.
    pub fn anchor(&self) -> usize {
        (0..self.d())
            .map(|i| {
                let k = (self.half_width[i] / self.h).round() as usize;
                k.min(self.counts[i] - 1) * self.strides[i]
            })
            .sum()
    }

    /// True when the ball of radius `r` lies inside the grid.
    pub fn covers_ball(&self, r: f64) -> bool {
        (0..self.d()).all(|i| {
            let hi = -self.half_width[i] + (self.counts[i] - 1) as f64 * self.h;
            self.half_width[i] >= r - 1e-12 && hi >= r - 1e-12
        })
    }

    /// Cell lower-corner indices and barycentric weights of `x`, clamped to the grid.
    fn locate(&self, x: &[f64], corner: &mut [usize], frac: &mut [f64]) {
        for i in 0..self.d() {
            let t = (x[i] + self.half_width[i]) / self.h;
            let max = (self.counts[i] - 1) as f64;
            let t = t.clamp(0.0, max);
            let k = (t.floor() as usize).min(self.counts[i] - 2);
            corner[i] = k;
            frac[i] = t - k as f64;
        }
    }

    /// Multilinear interpolation of a node field with `width` components.
    pub fn interpolate(&self, field: &[f64], width: usize, x: &[f64], out: &mut [f64]) {
        let d = self.d();
        let mut corner = vec![0usize; d];
        let mut frac = vec![0.0; d];
        self.locate(x, &mut corner, &mut frac);
        out.iter_mut().for_each(|v| *v = 0.0);
        for mask in 0..(1usize << d) {
            let mut wgt = 1.0;
            let mut s = 0;
            for i in 0..d {
                if mask >> i & 1 == 1 {
                    wgt *= frac[i];
                    s += (corner[i] + 1) * self.strides[i];
                } else {
                    wgt *= 1.0 - frac[i];
                    s += corner[i] * self.strides[i];
                }
            }
            if wgt != 0.0 {
                for c in 0..width {
                    out[c] += wgt * field[s * width + c];
                }
            }
        }
    }

    /// Central-difference gradient at interior nodes, one-sided at the boundary.
    pub fn gradient_into(&self, phi: &[f64], s: usize, out: &mut [f64]) {
        for i in 0..self.d() {
            let k = self.axis_index(s, i);
            let st = self.strides[i];
            out[i] = if k == 0 {
                (phi[s + st] - phi[s]) / self.h
            } else if k + 1 == self.counts[i] {
                (phi[s] - phi[s - st]) / self.h
            } else {
                (phi[s + st] - phi[s - st]) / (2.0 * self.h)
            };
        }
    }

    pub fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut g = vec![0.0; self.len() * d];
        for s in 0..self.len() {
            self.gradient_into(phi, s, &mut g[s * d..(s + 1) * d]);
        }
        g
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HjbOptions {
    /// Sup-norm bound on the interior residual.
    pub tol: f64,
    /// Bound on the spread of the value over the last `window` iterations.
    pub stability_tol: f64,
    pub window: usize,
    pub damping: f64,
    pub max_iter: usize,
    /// Class whose vertex is used at boundary nodes; `None` means the last class.
    pub boundary_class: Option<usize>,
    pub exec: Execution,
}

impl Default for HjbOptions {
    fn default() -> Self {
        HjbOptions {
            tol: 1e-6,
            stability_tol: 1e-8,
            window: 5,
            damping: 0.7,
            max_iter: 2000,
            boundary_class: None,
            exec: Execution::default(),
        }
    }
}

impl HjbOptions {
    fn u0(&self, d: usize) -> usize {
        self.boundary_class.unwrap_or(d - 1).min(d - 1)
    }
}

/// Log-form solution of the ergodic HJB equation.
#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub grid: Grid,
    pub params: LimitParams,
    pub value: f64,
    /// Log-eigenfunction, zero at `anchor`.
    pub phi: Vec<f64>,
    /// Control weights per node (stride `d`); vertices except when a control was imposed.
    pub control: Vec<f64>,
    /// Per-node residual of the discrete equation (zero at boundary nodes).
    pub residual: Vec<f64>,
    pub max_residual: f64,
    pub iterations: usize,
    pub anchor: usize,
    /// Offset of the anchor node from the origin.
    pub anchor_shift: Vec<f64>,
    pub u0: SimplexControl,
}

impl HjbSolution {
    pub fn control_at(&self, s: usize) -> &[f64] {
        let d = self.grid.d();
        &self.control[s * d..(s + 1) * d]
    }

    /// Index of the selected vertex at node `s` (largest weight, lowest index on ties).
    pub fn vertex_at(&self, s: usize) -> usize {
        argmax(self.control_at(s))
    }

    /// Columns `index x_1..x_d phi vertex residual`.
    pub fn write_field<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        write_field_rows(&mut w, &self.grid, &self.phi, |s| self.vertex_at(s), &self.residual)
    }
}

fn write_field_rows<W: Write>(
    w: &mut W,
    grid: &Grid,
    phi: &[f64],
    vertex: impl Fn(usize) -> usize,
    residual: &[f64],
) -> std::io::Result<()> {
    let d = grid.d();
    let mut header = vec!["index".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.extend(["phi", "vertex", "residual"].map(String::from));
    writeln!(w, "{}", header.join(" "))?;
    let mut x = vec![0.0; d];
    for s in 0..grid.len() {
        grid.coord_into(s, &mut x);
        let mut row = vec![s.to_string()];
        row.extend(x.iter().map(|v| format!("{v:.16e}")));
        row.push(format!("{:.16e}", phi[s]));
        row.push((vertex(s) + 1).to_string());
        row.push(format!("{:.16e}", residual[s]));
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the vertex `e_i` minimizing `b(x, e_i) . grad + min(r(x, e_i), cap)`,
/// lowest index on ties.
pub fn vertex_index(x: &[f64], grad: &[f64], p: &LimitParams, cap: f64) -> usize {
    let d = x.len();
    let s = x.iter().sum::<f64>().max(0.0);
    // b(x, e_i) . grad = const + s (mu_i - gamma_i) grad_i; r(x, e_i) = s kappa_i
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..d {
        let val = s * (p.mu[i] - p.gamma[i]) * grad[i] + (s * p.kappa[i]).min(cap);
        if val < best_val {
            best_val = val;
            best = i;
        }
    }
    best
}

/// Minimizer of `b(x,u) . grad + r(x,u)` over the simplex, attained at a vertex
/// because the objective is affine in `u`.
pub fn vertex_minimizer(x: &[f64], grad: &[f64], p: &LimitParams) -> Result<SimplexControl> {
    Error::check_dim(p.d(), x.len())?;
    Error::check_dim(p.d(), grad.len())?;
    Ok(SimplexControl::vertex(p.d(), vertex_index(x, grad, p, f64::INFINITY)))
}

/// Radial C^1 cutoff: 1 on `B_{l/2}`, 0 outside `B_l`.
pub fn chi(l: f64, x: &[f64]) -> f64 {
    if !(l > 0.0) {
        return 0.0;
    }
    let s = x.iter().map(|v| v * v).sum::<f64>().sqrt() / l;
    if s <= 0.5 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        let t = 2.0 * s - 1.0;
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

#[derive(Clone, Copy)]
enum Source<'a> {
    Optimize,
    Fixed(&'a [f64]),
}

struct Problem<'a> {
    p: &'a LimitParams,
    grid: &'a Grid,
    /// Cost cap (`r ^ cap`).
    cap: f64,
    /// Cutoff weights per node; `None` is the untruncated HJB.
    chi: Option<Vec<f64>>,
    /// Norm bound on the maximizer.
    wmax: f64,
    u: Source<'a>,
    w: Source<'a>,
    opts: &'a HjbOptions,
}

struct Raw {
    phi: Vec<f64>,
    value: f64,
    u: Vec<f64>,
    w: Vec<f64>,
    residual: Vec<f64>,
    max_residual: f64,
    iterations: usize,
}

/// Per-node frozen data: controls, drift `beta` and source `g`.
struct Frozen {
    u: Vec<f64>,
    w: Vec<f64>,
    beta: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn freeze(&self, phi: &[f64]) -> Frozen {
        let grid = self.grid;
        let d = grid.d();
        let m = grid.len();
        let sigma = self.p.sigma();
        let u0 = self.opts.u0(d);
        // [u | w | beta | g] per node
        let width = 3 * d + 1;
        let mut packed = vec![0.0; m * width];
        self.opts.exec.fill_chunks(&mut packed, width, |s, out| {
            let mut x = vec![0.0; d];
            let mut grad = vec![0.0; d];
            grid.coord_into(s, &mut x);
            grid.gradient_into(phi, s, &mut grad);
            let (u, rest) = out.split_at_mut(d);
            let (w, rest) = rest.split_at_mut(d);
            let (beta, g) = rest.split_at_mut(d);
            let c = self.chi.as_ref().map_or(1.0, |c| c[s]);
            match self.w {
                Source::Fixed(f) => w.copy_from_slice(&f[s * d..(s + 1) * d]),
                Source::Optimize => {
                    if c > 0.0 {
                        for i in 0..d {
                            w[i] = sigma[i] * grad[i] / c;
                        }
                        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > self.wmax {
                            let k = self.wmax / norm;
                            w.iter_mut().for_each(|v| *v *= k);
                        }
                    } else {
                        w.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            match self.u {
                Source::Fixed(f) => u.copy_from_slice(&f[s * d..(s + 1) * d]),
                Source::Optimize => {
                    let k = if grid.is_boundary(s) {
                        u0
                    } else {
                        self.upwind_vertex(phi, s, &x, c, w, beta)
                    };
                    u.iter_mut().for_each(|v| *v = 0.0);
                    u[k] = 1.0;
                }
            }
            drift_into(&x, u, self.p, beta);
            let mut w2 = 0.0;
            for i in 0..d {
                beta[i] += c * sigma[i] * w[i];
                w2 += w[i] * w[i];
            }
            g[0] = running_cost_raw(&x, u, &self.p.kappa).min(self.cap) - 0.5 * c * c * w2;
        });
        let mut fr = Frozen {
            u: Vec::with_capacity(m * d),
            w: Vec::with_capacity(m * d),
            beta: Vec::with_capacity(m * d),
            g: Vec::with_capacity(m),
        };
        for row in packed.chunks(width) {
            fr.u.extend_from_slice(&row[..d]);
            fr.w.extend_from_slice(&row[d..2 * d]);
            fr.beta.extend_from_slice(&row[2 * d..3 * d]);
            fr.g.push(row[3 * d]);
        }
        fr
    }

    /// Vertex minimizing the discrete upwind Hamiltonian at interior node `s`
    /// for the frozen tilt `c * Sigma w`; lowest index on ties. `scratch`
    /// holds `d` values.
    fn upwind_vertex(&self, phi: &[f64], s: usize, x: &[f64], c: f64, w: &[f64], scratch: &mut [f64]) -> usize {
        let grid = self.grid;
        let d = grid.d();
        let h = grid.h();
        let sigma = self.p.sigma();
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        let mut e = vec![0.0; d];
        for k in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[k] = 1.0;
            drift_into(x, &e, self.p, scratch);
            let mut val = running_cost_raw(x, &e, &self.p.kappa).min(self.cap);
            for j in 0..d {
                let st = grid.stride(j);
                let b = scratch[j] + c * sigma[j] * w[j];
                val += if b > 0.0 {
                    b * (phi[s + st] - phi[s]) / h
                } else {
                    b * (phi[s] - phi[s - st]) / h
                };
            }
            if val < best_val {
                best_val = val;
                best = k;
            }
        }
        best
    }

    /// Off-diagonal rates of node `s`: `(neighbor, rate)` for each axis and
    /// direction inside the grid.
    fn rates(&self, beta: &[f64], s: usize, mut f: impl FnMut(usize, f64)) {
        let grid = self.grid;
        let d = grid.d();
        let h = grid.h();
        for i in 0..d {
            let k = grid.axis_index(s, i);
            let st = grid.stride(i);
            let diff = self.p.lambda[i] / (h * h);
            let b = beta[s * d + i];
            if k + 1 < grid.counts()[i] {
                f(s + st, diff + b.max(0.0) / h);
            }
            if k > 0 {
                f(s - st, diff + (-b).max(0.0) / h);
            }
        }
    }

    fn apply(&self, beta: &[f64], v: &[f64], s: usize) -> f64 {
        let mut acc = 0.0;
        self.rates(beta, s, |t, r| acc += r * (v[t] - v[s]));
        acc
    }

    /// Exact solution of the frozen ergodic equation.
    fn linear_solve(&self, fr: &Frozen, anchor: usize) -> Result<(Vec<f64>, f64)> {
        let grid = self.grid;
        let m = grid.len();
        let band = grid.stride(0);
        let mut a = BandMatrix::zeros(m, band, band);
        for s in 0..m {
            if s == anchor {
                a.set(s, s, 1.0);
                continue;
            }
            let mut diag = 0.0;
            self.rates(&fr.beta, s, |t, r| {
                a.add(s, t, r);
                diag += r;
            });
            a.add(s, s, -diag);
        }
        let lu = a.factor()?;
        let mut y: Vec<f64> = fr.g.iter().map(|g| -g).collect();
        y[anchor] = 0.0;
        let mut z = vec![1.0; m];
        z[anchor] = 0.0;
        lu.solve_in_place(&mut y);
        lu.solve_in_place(&mut z);
        let ay = self.apply(&fr.beta, &y, anchor);
        let az = self.apply(&fr.beta, &z, anchor);
        let value = (ay + fr.g[anchor]) / (1.0 - az);
        let phi = y.iter().zip(&z).map(|(a, b)| a + value * b).collect();
        Ok((phi, value))
    }

    fn residual(&self, fr: &Frozen, phi: &[f64], value: f64) -> Vec<f64> {
        let grid = self.grid;
        let mut res = vec![0.0; grid.len()];
        self.opts.exec.fill(&mut res, |s| {
            if grid.is_boundary(s) {
                0.0
            } else {
                self.apply(&fr.beta, phi, s) + fr.g[s] - value
            }
        });
        res
    }

    fn solve(&self, start: Option<(&[f64], f64)>) -> Result<Raw> {
        let grid = self.grid;
        let anchor = grid.anchor();
        let opts = self.opts;
        let (mut phi, mut value) = match start {
            Some((p, v)) => (p.to_vec(), v),
            None => (vec![0.0; grid.len()], 0.0),
        };
        let mut history: Vec<f64> = Vec::new();
        let mut last_res = f64::INFINITY;
        for it in 0..opts.max_iter {
            let fr = self.freeze(&phi);
            let res = self.residual(&fr, &phi, value);
            let max_res = res.iter().fold(0.0f64, |a, r| a.max(r.abs()));
            last_res = max_res;
            history.push(value);
            let stable = history.len() > opts.window && {
                let tail = &history[history.len() - opts.window - 1..];
                let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                hi - lo <= opts.stability_tol
            };
            if max_res <= opts.tol && stable {
                return Ok(Raw {
                    phi,
                    value,
                    u: fr.u,
                    w: fr.w,
                    residual: res,
                    max_residual: max_res,
                    iterations: it,
                });
            }
            let (new_phi, new_value) = self.linear_solve(&fr, anchor)?;
            let th = if it == 0 && start.is_none() { 1.0 } else { opts.damping };
            for (a, b) in phi.iter_mut().zip(&new_phi) {
                *a += th * (b - *a);
            }
            value += th * (new_value - value);
        }
        Err(Error::NonConvergence {
            solver: "hjb",
            iterations: opts.max_iter,
            last_change: last_res,
        })
    }
}

fn node_controls(v: &MarkovControl, grid: &Grid) -> Vec<f64> {
    let d = grid.d();
    let mut out = vec![0.0; grid.len() * d];
    let mut x = vec![0.0; d];
    for s in 0..grid.len() {
        grid.coord_into(s, &mut x);
        out[s * d..(s + 1) * d].copy_from_slice(v.eval(&x).as_slice());
    }
    out
}

fn finish_hjb(raw: Raw, p: &LimitParams, grid: &Grid, opts: &HjbOptions) -> HjbSolution {
    let anchor = grid.anchor();
    let d = grid.d();
    HjbSolution {
        grid: grid.clone(),
        params: p.clone(),
        value: raw.value,
        phi: raw.phi,
        control: raw.u,
        residual: raw.residual,
        max_residual: raw.max_residual,
        iterations: raw.iterations,
        anchor,
        anchor_shift: grid.coord(anchor),
        u0: SimplexControl::vertex(d, opts.u0(d)),
    }
}

/// Solves `min_u [b(x,u).grad Phi + r(x,u)] + sum_i lambda_i d_ii Phi +
/// |Sigma^T grad Phi|^2 / 2 = value` on the grid.
pub fn hjb_solve(p: &LimitParams, grid: &Grid, opts: &HjbOptions) -> Result<HjbSolution> {
    Error::check_dim(p.d(), grid.d())?;
    let prob = Problem {
        p,
        grid,
        cap: f64::INFINITY,
        chi: None,
        wmax: f64::INFINITY,
        u: Source::Optimize,
        w: Source::Optimize,
        opts,
    };
    Ok(finish_hjb(prob.solve(None)?, p, grid, opts))
}

/// Value of a fixed Markov control: the same equation without the minimization.
pub fn hjb_solve_for_control(
    v: &MarkovControl,
    p: &LimitParams,
    grid: &Grid,
    opts: &HjbOptions,
) -> Result<HjbSolution> {
    Error::check_dim(p.d(), grid.d())?;
    Error::check_dim(p.d(), v.d())?;
    let u = node_controls(v, grid);
    let prob = Problem {
        p,
        grid,
        cap: f64::INFINITY,
        chi: None,
        wmax: f64::INFINITY,
        u: Source::Fixed(&u),
        w: Source::Optimize,
        opts,
    };
    Ok(finish_hjb(prob.solve(None)?, p, grid, opts))
}

/// Value change when the grid grows by `extra` on every side.
pub fn boundary_sensitivity(p: &LimitParams, grid: &Grid, extra: f64, opts: &HjbOptions) -> Result<f64> {
    let a = hjb_solve(p, grid, opts)?;
    let bigger = Grid::new(grid.half_width().iter().map(|l| l + extra).collect(), grid.h())?;
    let b = hjb_solve(p, &bigger, opts)?;
    Ok((a.value - b.value).abs())
}

/// Vector field stored at grid nodes, multilinearly interpolated and clamped
/// to the grid outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridVectorField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridVectorField {
    pub fn at(&self, s: usize) -> &[f64] {
        let d = self.grid.d();
        &self.values[s * d..(s + 1) * d]
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.grid.interpolate(&self.values, self.grid.d(), x, out);
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.d()];
        self.eval_into(x, &mut out);
        out
    }

    /// Largest node norm; bounds the norm of the interpolant everywhere.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks(self.grid.d())
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn to_bounded_field(&self) -> BoundedField {
        let me = self.clone();
        BoundedField::new(self.grid.d(), self.sup_norm(), move |x, out| me.eval_into(x, out))
    }
}

/// `w* = Sigma^T grad Phi` at every node (central differences inside, one-sided
/// at the boundary).
pub fn ground_control(sol: &HjbSolution) -> GridVectorField {
    ground_field(&sol.grid, &sol.phi, &sol.params)
}

/// `Sigma^T grad phi` for an arbitrary node field.
pub fn ground_field(grid: &Grid, phi: &[f64], p: &LimitParams) -> GridVectorField {
    let sigma = p.sigma();
    let d = grid.d();
    let mut values = grid.gradient(phi);
    for s in 0..grid.len() {
        for i in 0..d {
            values[s * d + i] *= sigma[i];
        }
    }
    GridVectorField {
        grid: grid.clone(),
        values,
    }
}

/// Truncated game solution.
#[derive(Debug, Clone)]
pub struct GameSolution {
    pub l: f64,
    pub value: f64,
    pub grid: Grid,
    /// Log of the normalized value function, zero at the anchor.
    pub phi: Vec<f64>,
    /// Minimizer weights per node (stride `d`).
    pub control: Vec<f64>,
    /// Maximizer per node (stride `d`), norm at most `l`, zero outside `B_l`.
    pub w: Vec<f64>,
    pub residual: Vec<f64>,
    pub max_residual: f64,
    pub iterations: usize,
}

impl GameSolution {
    pub fn maximizer(&self) -> GridVectorField {
        GridVectorField {
            grid: self.grid.clone(),
            values: self.w.clone(),
        }
    }

    /// Effective drift tilt `chi_l w` at every node.
    pub fn effective_tilt(&self) -> GridVectorField {
        let d = self.grid.d();
        let mut values = self.w.clone();
        let mut x = vec![0.0; d];
        for s in 0..self.grid.len() {
            self.grid.coord_into(s, &mut x);
            let c = chi(self.l, &x);
            for v in &mut values[s * d..(s + 1) * d] {
                *v *= c;
            }
        }
        GridVectorField {
            grid: self.grid.clone(),
            values,
        }
    }

    pub fn write_field<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        let d = self.grid.d();
        write_field_rows(
            &mut w,
            &self.grid,
            &self.phi,
            |s| argmax(&self.control[s * d..(s + 1) * d]),
            &self.residual,
        )
    }
}

/// Minimizing player of the game.
#[derive(Debug, Clone)]
pub enum GameControl {
    Optimize,
    Fixed(MarkovControl),
}

fn game_problem<'a>(
    p: &'a LimitParams,
    l: f64,
    grid: &'a Grid,
    u: Source<'a>,
    w: Source<'a>,
    opts: &'a HjbOptions,
) -> Problem<'a> {
    let d = grid.d();
    let mut x = vec![0.0; d];
    let chi_nodes = (0..grid.len())
        .map(|s| {
            grid.coord_into(s, &mut x);
            chi(l, &x)
        })
        .collect();
    Problem {
        p,
        grid,
        cap: l,
        chi: Some(chi_nodes),
        wmax: l,
        u,
        w,
        opts,
    }
}

/// Solves `min_u max_{|w| <= l} [L^u Phi + r ^ l - |chi_l w|^2/2 + chi_l Sigma w . grad Phi] = rho_l`.
/// The inner maximum is explicit: `w = Sigma^T grad Phi / chi_l` clamped to the
/// ball of radius `l`, and `w = 0` where `chi_l = 0`.
pub fn game_solve(v: &GameControl, p: &LimitParams, l: f64, grid: &Grid, opts: &HjbOptions) -> Result<GameSolution> {
    Error::check_dim(p.d(), grid.d())?;
    if !(l > 0.0) {
        return Err(Error::params("truncation radius must be positive"));
    }
    let fixed;
    let u = match v {
        GameControl::Optimize => Source::Optimize,
        GameControl::Fixed(c) => {
            Error::check_dim(p.d(), c.d())?;
            fixed = node_controls(c, grid);
            Source::Fixed(&fixed)
        }
    };
    let prob = game_problem(p, l, grid, u, Source::Optimize, opts);
    let raw = prob.solve(None)?;
    Ok(game_from_raw(raw, l, grid))
}

fn game_from_raw(raw: Raw, l: f64, grid: &Grid) -> GameSolution {
    GameSolution {
        l,
        value: raw.value,
        grid: grid.clone(),
        phi: raw.phi,
        control: raw.u,
        w: raw.w,
        residual: raw.residual,
        max_residual: raw.max_residual,
        iterations: raw.iterations,
    }
}

/// Values obtained by freezing one optimal field of a game solution and
/// re-optimizing the other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimaxCheck {
    pub value: f64,
    /// Minimizer frozen, maximizer re-optimized.
    pub control_frozen: f64,
    /// Maximizer frozen, minimizer re-optimized.
    pub tilt_frozen: f64,
}

impl MinimaxCheck {
    pub fn max_gap(&self) -> f64 {
        (self.control_frozen - self.value)
            .abs()
            .max((self.tilt_frozen - self.value).abs())
    }
}

pub fn game_minimax_check(sol: &GameSolution, p: &LimitParams, opts: &HjbOptions) -> Result<MinimaxCheck> {
    let grid = &sol.grid;
    let a = game_problem(p, sol.l, grid, Source::Fixed(&sol.control), Source::Optimize, opts).solve(None)?;
    let b = game_problem(p, sol.l, grid, Source::Optimize, Source::Fixed(&sol.w), opts).solve(None)?;
    Ok(MinimaxCheck {
        value: sol.value,
        control_frozen: a.value,
        tilt_frozen: b.value,
    })
}

/// Game values over increasing truncation radii, compared with the HJB value.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSweep {
    pub rows: Vec<(f64, f64)>,
    pub hjb_value: f64,
    /// Every consecutive pair satisfies `rho_next >= rho - slack`.
    pub monotone: bool,
    /// `|rho_last - hjb_value|`.
    pub gap_to_hjb: f64,
}

pub fn game_limit_sweep(
    p: &LimitParams,
    grid: &Grid,
    ls: &[f64],
    opts: &HjbOptions,
    slack: f64,
) -> Result<GameSweep> {
    if ls.is_empty() || ls.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::params("truncation radii must be increasing"));
    }
    let hjb = hjb_solve(p, grid, opts)?;
    let mut rows = Vec::with_capacity(ls.len());
    for &l in ls {
        let g = game_solve(&GameControl::Optimize, p, l, grid, opts)?;
        rows.push((l, g.value));
    }
    let monotone = rows.windows(2).all(|w| w[1].1 >= w[0].1 - slack);
    let gap_to_hjb = (rows.last().unwrap().1 - hjb.value).abs();
    Ok(GameSweep {
        rows,
        hjb_value: hjb.value,
        monotone,
        gap_to_hjb,
    })
}

/// Blends the interpolated selector of `sol` with `u0` through the cutoff that
/// is 1 on `B_{l-2/k}`, 0 outside `B_{l-1/k}` and linear in the radius between.
/// The result is continuous and frozen to `u0` outside `B_l`.
pub fn continuous_near_optimal_control(sol: &HjbSolution, l: f64, k: f64) -> Result<MarkovControl> {
    if !(k > 0.0) || !(l - 2.0 / k > 0.0) {
        return Err(Error::params("need k > 0 and l > 2/k"));
    }
    let grid = sol.grid.clone();
    let field = sol.control.clone();
    let u0 = sol.u0.clone();
    let u0_inner = u0.clone();
    let d = grid.d();
    Ok(MarkovControl::new(
        move |x: &[f64]| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cut = ((l - 1.0 / k - r) * k).clamp(0.0, 1.0);
            if cut == 0.0 {
                return u0_inner.clone();
            }
            let mut raw = vec![0.0; d];
            grid.interpolate(&field, d, x, &mut raw);
            SimplexControl::from_weights_unchecked(raw).blend(cut, &u0_inner)
        },
        u0,
        l,
        true,
    ))
}
