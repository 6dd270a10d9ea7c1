//! Experiment configuration, occupation histograms, report emission and the
//! end-to-end experiments behind the command-line subcommands.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{
    boundary_excursion_stats, simulate, simulate_tilted, Accum, Clock, LatticeBox, PathRecord, TiltControl,
};
use crate::hjb::{continuous_near_optimal_control, game_solve, hjb_solve, GameControl, Grid, HjbOptions, HjbSolution};
use crate::lyapunov::{drift_report, DriftOptions, LyapunovZ};
use crate::model::{
    running_cost, scale_state, scp_from_markov_control, LimitParams, MarkovControl, PriorityFill, SystemN,
};
use crate::par::Execution;
use crate::rng;
use crate::spectral::{prelimit_optimize, prelimit_value_under_markov_control, SpectralOptions};
use crate::variational::{
    bm_direct_log_mgf, bm_lower_bound_certificate, fclt_linear_check, lowerbound_entropy_envelope,
    lowerbound_entropy_limit, lowerbound_entropy_rate, make_lowerbound_tilt, poisson_direct_log_mgf,
    poisson_lower_bound_certificate, BrownianTilt, Certificate, CountFunctional, McOptions, Mesh, PathFunctional,
    PoissonTilt,
};
use crate::{Error, Result};

/// Settings of the `[experiment]` table; every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub n_list: Vec<u32>,
    /// Box half-width beyond `n rho` in units of `sqrt(n)`.
    pub margin: f64,
    pub spectral_tol: f64,
    /// Re-solve each row on a box one margin unit smaller and report the shift.
    pub truncation_check: bool,
    /// Largest acceptable shift of that re-solve.
    pub truncation_tol: f64,
    pub grid_half_width: f64,
    pub grid_h: f64,
    pub hjb_tol: f64,
    pub hjb_stability_tol: f64,
    pub hjb_max_iter: usize,
    /// Extra half-width of the grid used for the boundary-sensitivity solve.
    pub boundary_extra: f64,
    pub game_l: f64,
    pub game_grid_half_width: f64,
    pub game_grid_h: f64,
    pub near_optimal_radius: f64,
    pub mollifier_k: f64,
    pub horizon: f64,
    pub replications: usize,
    pub seed: u64,
    pub shell: [f64; 2],
    pub eps0: f64,
    pub eps1: f64,
    pub tilts: usize,
    pub mc_replications: usize,
    pub bm_horizon: f64,
    pub bm_steps: usize,
    pub poisson_rate: f64,
    pub poisson_horizon: f64,
    pub fclt_c: Vec<f64>,
    pub fclt_lambda: Vec<f64>,
    pub fclt_n: Vec<f64>,
    pub simulate_n: u32,
    pub simulate_horizon: f64,
    /// Run without the rayon pool.
    pub sequential: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            n_list: vec![16, 64, 256],
            margin: 6.0,
            spectral_tol: 1e-10,
            truncation_check: true,
            truncation_tol: 1e-3,
            grid_half_width: 6.0,
            grid_h: 0.1,
            hjb_tol: 1e-6,
            hjb_stability_tol: 1e-8,
            hjb_max_iter: 2000,
            boundary_extra: 1.0,
            game_l: 8.0,
            game_grid_half_width: 8.0,
            game_grid_h: 0.2,
            near_optimal_radius: 4.0,
            mollifier_k: 4.0,
            horizon: 200.0,
            replications: 8,
            seed: 1,
            shell: [2.0, 4.0],
            eps0: 1.0,
            eps1: 1.0,
            tilts: 20,
            mc_replications: 4000,
            bm_horizon: 1.0,
            bm_steps: 50,
            poisson_rate: 2.0,
            poisson_horizon: 1.0,
            fclt_c: vec![0.5, 1.0, 2.0],
            fclt_lambda: vec![0.5, 1.0, 2.0],
            fclt_n: vec![1e2, 1e4, 1e6],
            simulate_n: 64,
            simulate_horizon: 50.0,
            sequential: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    params: LimitParams,
    #[serde(default)]
    experiment: ExperimentSettings,
}

/// Instance parameters plus experiment settings, with the source text kept
/// for echoing into outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub params: LimitParams,
    pub experiment: ExperimentSettings,
    source: String,
}

impl ExperimentConfig {
    pub fn new(params: LimitParams, experiment: ExperimentSettings) -> Result<Self> {
        params.validate()?;
        let mut cfg = ExperimentConfig {
            params,
            experiment,
            source: String::new(),
        };
        cfg.validate()?;
        cfg.source = cfg.to_toml_string()?;
        Ok(cfg)
    }

    /// Reference instance with default settings.
    pub fn reference() -> Self {
        Self::new(LimitParams::reference(), ExperimentSettings::default()).expect("reference config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.params
            .validate()
            .map_err(|e| Error::Config(format!("[params]: {e}")))?;
        let cfg = ExperimentConfig {
            params: file.params,
            experiment: file.experiment,
            source: text.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = ConfigFile {
            params: self.params.clone(),
            experiment: self.experiment.clone(),
        };
        toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the seed; the preamble reports the effective one.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if e.n_list.is_empty() || e.n_list.contains(&0) {
            return bad("n_list must be non-empty with positive entries");
        }
        if !(e.margin > 0.0 && e.spectral_tol > 0.0 && e.hjb_tol > 0.0 && e.hjb_stability_tol > 0.0) {
            return bad("margin and tolerances must be positive");
        }
        if !(e.grid_h > 0.0 && e.grid_half_width > 0.0 && e.game_grid_h > 0.0 && e.game_grid_half_width > 0.0) {
            return bad("grid extents and spacings must be positive");
        }
        if !(e.game_l > 0.0 && e.near_optimal_radius > 0.0 && e.mollifier_k > 0.0) {
            return bad("truncation radii and mollifier must be positive");
        }
        if !(e.horizon > 0.0 && e.bm_horizon > 0.0 && e.poisson_horizon > 0.0 && e.simulate_horizon > 0.0) {
            return bad("horizons must be positive");
        }
        if e.replications == 0 || e.mc_replications < 2 || e.bm_steps == 0 {
            return bad("replication and step counts must be positive");
        }
        if !(e.shell[0] > 0.0 && e.shell[1] > e.shell[0]) {
            return bad("shell must satisfy 0 < inner < outer");
        }
        if !(e.eps0 > 0.0 && e.eps1 > 0.0 && e.poisson_rate > 0.0) {
            return bad("eps0, eps1 and poisson_rate must be positive");
        }
        if e.simulate_n == 0 {
            return bad("simulate_n must be positive");
        }
        Ok(())
    }

    pub fn exec(&self) -> Execution {
        if self.experiment.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Config source and seed as comment lines.
    pub fn preamble(&self) -> Vec<String> {
        let mut out: Vec<String> = self.source.lines().map(|l| format!("config: {l}")).collect();
        out.push(format!("seed = {}", self.experiment.seed));
        out
    }

    fn hjb_options(&self) -> HjbOptions {
        HjbOptions {
            tol: self.experiment.hjb_tol,
            stability_tol: self.experiment.hjb_stability_tol,
            max_iter: self.experiment.hjb_max_iter,
            exec: self.exec(),
            ..Default::default()
        }
    }

    fn spectral_options(&self) -> SpectralOptions {
        SpectralOptions {
            tol: self.experiment.spectral_tol,
            exec: self.exec(),
            ..Default::default()
        }
    }

    fn grid(&self) -> Result<Grid> {
        Grid::cube(self.params.d(), self.experiment.grid_half_width, self.experiment.grid_h)
    }

    fn game_grid(&self) -> Result<Grid> {
        Grid::cube(self.params.d(), self.experiment.game_grid_half_width, self.experiment.game_grid_h)
    }
}

/// Time-weighted counts of a path on a uniform box of bins; mass outside the
/// box is kept in a single overflow bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationHistogram {
    lower: Vec<f64>,
    width: f64,
    counts: Vec<usize>,
    strides: Vec<usize>,
    weights: Vec<f64>,
    overflow: f64,
    total: Accum,
}

impl OccupationHistogram {
    pub fn new(lower: Vec<f64>, width: f64, counts: Vec<usize>) -> Result<Self> {
        if lower.len() != counts.len() || counts.is_empty() || counts.contains(&0) || !(width > 0.0) {
            return Err(Error::params("histogram needs matching positive bin counts and width"));
        }
        let d = counts.len();
        let mut strides = vec![1; d];
        for i in (0..d - 1).rev() {
            strides[i] = strides[i + 1] * counts[i + 1];
        }
        let len = strides[0] * counts[0];
        Ok(OccupationHistogram {
            lower,
            width,
            counts,
            strides,
            weights: vec![0.0; len],
            overflow: 0.0,
            total: Accum::default(),
        })
    }

    /// One bin per grid node, centered on it.
    pub fn for_grid(grid: &Grid) -> Self {
        let lower = grid.half_width().iter().map(|l| -l - 0.5 * grid.h()).collect();
        Self::new(lower, grid.h(), grid.counts().to_vec()).expect("grid is valid")
    }

    pub fn d(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn overflow(&self) -> f64 {
        self.overflow
    }

    /// Elapsed time added so far, overflow included.
    pub fn total(&self) -> f64 {
        self.total.value()
    }

    pub fn bin_of(&self, x: &[f64]) -> Option<usize> {
        let mut s = 0;
        for i in 0..self.d() {
            let k = ((x[i] - self.lower[i]) / self.width).floor();
            if !(k >= 0.0 && k < self.counts[i] as f64) {
                return None;
            }
            s += k as usize * self.strides[i];
        }
        Some(s)
    }

    pub fn center(&self, bin: usize) -> Vec<f64> {
        (0..self.d())
            .map(|i| self.lower[i] + ((bin / self.strides[i]) % self.counts[i]) as f64 * self.width + 0.5 * self.width)
            .collect()
    }

    pub fn add(&mut self, x: &[f64], dt: f64) {
        match self.bin_of(x) {
            Some(b) => self.weights[b] += dt,
            None => self.overflow += dt,
        }
        self.total.add(dt);
    }

    /// Adds the scaled-state occupation of a path.
    pub fn add_path(&mut self, path: &PathRecord, sys: &SystemN) {
        for (t0, t1, k) in path.segments() {
            let xh = scale_state(path.state(k), sys);
            self.add(&xh, t1 - t0);
        }
    }

    pub fn merge(&mut self, other: &OccupationHistogram) -> Result<()> {
        if self.lower != other.lower || self.width != other.width || self.counts != other.counts {
            return Err(Error::params("histograms have different bins"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        self.overflow += other.overflow;
        self.total.add(other.total());
        Ok(())
    }

    /// Weights summed over every axis except `axis`.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.counts[axis]];
        for (b, w) in self.weights.iter().enumerate() {
            out[(b / self.strides[axis]) % self.counts[axis]] += w;
        }
        out
    }

    /// Merges blocks of `factor` bins along every axis (trailing partial blocks
    /// form their own bins).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::params("coarsening factor must be positive"));
        }
        let counts: Vec<usize> = self.counts.iter().map(|c| c.div_ceil(factor)).collect();
        let mut out = Self::new(self.lower.clone(), self.width * factor as f64, counts)?;
        for (b, w) in self.weights.iter().enumerate() {
            let mut s = 0;
            for i in 0..self.d() {
                s += ((b / self.strides[i]) % self.counts[i]) / factor * out.strides[i];
            }
            out.weights[s] += w;
        }
        out.overflow = self.overflow;
        out.total = self.total;
        Ok(out)
    }

    /// `sum_bins weight * f(center) / inside mass`; zero for an empty histogram.
    pub fn mean(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut acc = Accum::default();
        let mut mass = Accum::default();
        for (b, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                acc.add(w * f(&self.center(b)));
                mass.add(w);
            }
        }
        if mass.value() > 0.0 {
            acc.value() / mass.value()
        } else {
            0.0
        }
    }
}

/// A table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Bool(bool),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) if v.is_nan() => write!(f, "NaN"),
            Cell::Num(v) => write!(f, "{v:.16e}"),
            Cell::Bool(v) => write!(f, "{v}"),
            Cell::Text(s) => write!(f, "{s}"),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Cell::Bool(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cells of the named column.
    pub fn values(&self, name: &str) -> Vec<&Cell> {
        match self.column(name) {
            Some(j) => self.rows.iter().map(|r| &r[j]).collect(),
            None => Vec::new(),
        }
    }
}

/// Result of an experiment: scalar summary entries plus tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub summary: Vec<(String, Cell)>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(title: impl Into<String>) -> Self {
        Report {
            title: title.into(),
            summary: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn note(&mut self, key: &str, value: impl Into<Cell>) {
        self.summary.push((key.to_string(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&Cell> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Txt,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "txt" => Ok(Format::Txt),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// Writes a report. CSV puts the preamble, title and summary in `#` comment
/// lines and each table as a header row plus data rows, tables separated by a
/// `# table: <name>` line. Text writes `key = value` lines and whitespace
/// separated columns.
pub fn write_report<W: Write>(report: &Report, mut w: W, format: Format, preamble: &[String]) -> std::io::Result<()> {
    for line in preamble {
        writeln!(w, "# {line}")?;
    }
    match format {
        Format::Csv => {
            writeln!(w, "# {}", report.title)?;
            for (k, v) in &report.summary {
                writeln!(w, "# {k} = {v}")?;
            }
            for t in &report.tables {
                writeln!(w, "# table: {}", t.name)?;
                let mut buf = Vec::new();
                {
                    let mut cw = csv::Writer::from_writer(&mut buf);
                    cw.write_record(&t.columns)?;
                    for row in &t.rows {
                        cw.write_record(row.iter().map(|c| c.to_string()))?;
                    }
                    cw.flush()?;
                }
                w.write_all(&buf)?;
            }
        }
        Format::Txt => {
            writeln!(w, "title = {:?}", report.title)?;
            for (k, v) in &report.summary {
                match v {
                    Cell::Text(s) => writeln!(w, "{k} = {s:?}")?,
                    _ => writeln!(w, "{k} = {v}")?,
                }
            }
            for t in &report.tables {
                writeln!(w)?;
                writeln!(w, "[{}]", t.name)?;
                writeln!(w, "{}", t.columns.join(" "))?;
                for row in &t.rows {
                    let cells: Vec<String> = row
                        .iter()
                        .map(|c| match c {
                            Cell::Text(s) => format!("{s:?}"),
                            other => other.to_string(),
                        })
                        .collect();
                    writeln!(w, "{}", cells.join(" "))?;
                }
            }
        }
    }
    Ok(())
}

/// [`write_report`] to a file.
pub fn emit(report: &Report, path: &Path, format: Format, preamble: &[String]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    write_report(report, &mut out, format, preamble).map_err(io)?;
    out.flush().map_err(io)
}

fn failed(e: &Error) -> Cell {
    Cell::Text(format!("failed: {e}"))
}

/// Prelimit optimal values against the diffusion value for each `n`.
pub fn ao_table(cfg: &ExperimentConfig) -> Result<Report> {
    let p = &cfg.params;
    let e = &cfg.experiment;
    let hjb = hjb_solve(p, &cfg.grid()?, &cfg.hjb_options())?;
    let lam = hjb.value;
    let mut report = Report::new("asymptotic optimality");
    report.note("hjb_value", lam);
    report.note("hjb_residual", hjb.max_residual);
    report.note("hjb_iterations", hjb.iterations);
    report.note("grid_half_width", e.grid_half_width);
    report.note("grid_h", e.grid_h);
    if e.truncation_check {
        let bigger = Grid::cube(p.d(), e.grid_half_width + e.boundary_extra, e.grid_h)?;
        match hjb_solve(p, &bigger, &cfg.hjb_options()) {
            Ok(b) => report.note("hjb_boundary_shift", (b.value - lam).abs()),
            Err(err) => report.note("hjb_boundary_shift", failed(&err)),
        }
    }
    let opts = cfg.spectral_options();
    let rows = cfg.exec().map(e.n_list.len(), |k| -> Result<Vec<Cell>> {
        let n = e.n_list[k];
        let sys = SystemN::canonical(p, n)?;
        let lattice = LatticeBox::with_margin(&sys, e.margin)?;
        let res = prelimit_optimize(&sys, &lattice, &opts)?;
        let v = res.solution.value;
        let (shift, ok) = if e.truncation_check && e.margin > 1.0 {
            let small = LatticeBox::with_margin(&sys, e.margin - 1.0)?;
            let s = prelimit_optimize(&sys, &small, &opts)?.solution.value;
            let shift = (v - s).abs();
            (shift, shift <= e.truncation_tol)
        } else {
            (f64::NAN, true)
        };
        let gap = (v - lam).abs();
        Ok(vec![
            n.into(),
            lattice.len().into(),
            v.into(),
            lam.into(),
            gap.into(),
            (gap / lam.abs().max(f64::MIN_POSITIVE)).into(),
            res.history.len().into(),
            shift.into(),
            ok.into(),
            "ok".into(),
        ])
    });
    let mut table = Table::new(
        "ao",
        &[
            "n",
            "states",
            "prelimit_value",
            "hjb_value",
            "gap",
            "relative_gap",
            "policy_evaluations",
            "truncation_shift",
            "truncation_ok",
            "status",
        ],
    );
    let mut gaps = Vec::new();
    for (k, row) in rows.into_iter().enumerate() {
        match row {
            Ok(r) => {
                gaps.push(r[4].as_f64().unwrap());
                table.push(r);
            }
            Err(err) => {
                let nan = Cell::Num(f64::NAN);
                table.push(vec![
                    e.n_list[k].into(),
                    Cell::Int(0),
                    nan.clone(),
                    lam.into(),
                    nan.clone(),
                    nan.clone(),
                    Cell::Int(0),
                    nan,
                    false.into(),
                    failed(&err),
                ]);
            }
        }
    }
    let all_ok = gaps.len() == e.n_list.len();
    report.note("rows_ok", all_ok);
    report.note("gap_non_increasing", all_ok && gaps.windows(2).all(|w| w[1] <= w[0]));
    if let Some(&last) = gaps.last() {
        report.note("final_relative_gap", last / lam.abs().max(f64::MIN_POSITIVE));
    }
    report.tables.push(table);
    Ok(report)
}

fn near_optimal_control(cfg: &ExperimentConfig, sol: &HjbSolution) -> Result<MarkovControl> {
    continuous_near_optimal_control(sol, cfg.experiment.near_optimal_radius, cfg.experiment.mollifier_k)
}

/// Lower-bound pipeline: tilts each prelimit system by the game maximizer and
/// compares the tilted payoff with the occupation integral of
/// `r - |w|^2/2`.
pub fn lowerbound_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    let p = &cfg.params;
    let e = &cfg.experiment;
    let d = p.d();
    let hjb = hjb_solve(p, &cfg.grid()?, &cfg.hjb_options())?;
    let v = near_optimal_control(cfg, &hjb)?;
    let game_grid = cfg.game_grid()?;
    let game = game_solve(&GameControl::Optimize, p, e.game_l, &game_grid, &cfg.hjb_options())?;
    let wfield = game.effective_tilt();
    let bounded = wfield.to_bounded_field();
    let mut report = Report::new("lower bound");
    report.note("hjb_value", hjb.value);
    report.note("game_value", game.value);
    report.note("game_l", e.game_l);
    report.note("tilt_sup_norm", bounded.sup_norm);
    let mut table = Table::new(
        "lower_bound",
        &[
            "n",
            "payoff_minus_entropy",
            "stderr",
            "mean_cost",
            "mean_entropy",
            "occupation_integral",
            "occupation_integral_entropy_limit",
            "occupation_overflow",
            "max_entropy_gap",
            "envelope_ok",
            "status",
        ],
    );
    for &n in &e.n_list {
        let row = (|| -> Result<Vec<Cell>> {
            let sys = SystemN::canonical(p, n)?;
            let scp = scp_from_markov_control(&v, &sys)?;
            let tilt = make_lowerbound_tilt(&bounded, &sys)?;
            let x0 = sys.center();
            let runs = cfg.exec().map(e.replications, |r| -> Result<(f64, f64, OccupationHistogram)> {
                let seed = rng::derive_seed(e.seed, ((n as u64) << 32) | r as u64);
                let path = simulate_tilted(&sys, &scp, &tilt, &x0, e.horizon, seed)?;
                let mut h = OccupationHistogram::for_grid(&game_grid);
                h.add_path(&path, &sys);
                Ok((path.total_cost / e.horizon, path.total_entropy / e.horizon, h))
            });
            let mut hist = OccupationHistogram::for_grid(&game_grid);
            let mut payoff = Vec::new();
            let mut cost = Accum::default();
            let mut ent = Accum::default();
            for run in runs {
                let (c, k, h) = run?;
                payoff.push(c - k);
                cost.add(c);
                ent.add(k);
                hist.merge(&h)?;
            }
            let est = crate::variational::McEstimate::from_samples(&payoff);
            let reps = e.replications as f64;
            let mut wbuf = vec![0.0; d];
            let integrand = |x: &[f64], scale: &dyn Fn(&[f64]) -> f64| {
                let u = v.eval(x);
                let r = running_cost(x, &u, p).unwrap_or(f64::NAN);
                let mut w = vec![0.0; d];
                bounded.eval_into(x, &mut w);
                r - scale(&w)
            };
            let half_norm = |w: &[f64]| 0.5 * w.iter().map(|a| a * a).sum::<f64>();
            let limit = |w: &[f64]| lowerbound_entropy_limit(w, p);
            let occ = hist.mean(|x| integrand(x, &half_norm));
            let occ_limit = hist.mean(|x| integrand(x, &limit));
            // closed-form comparison of the entropy rate with its limit over the ball
            let mut max_gap: f64 = 0.0;
            let mut env_ok = true;
            let mut x = vec![0.0; d];
            for s in 0..game_grid.len() {
                game_grid.coord_into(s, &mut x);
                bounded.eval_into(&x, &mut wbuf);
                let gap = (lowerbound_entropy_rate(&wbuf, &sys) - lowerbound_entropy_limit(&wbuf, p)).abs();
                max_gap = max_gap.max(gap);
                if gap > lowerbound_entropy_envelope(&wbuf, &sys, p) * (1.0 + 1e-9) + 1e-15 {
                    env_ok = false;
                }
            }
            Ok(vec![
                n.into(),
                est.estimate.into(),
                est.stderr.into(),
                (cost.value() / reps).into(),
                (ent.value() / reps).into(),
                occ.into(),
                occ_limit.into(),
                (hist.overflow() / hist.total().max(f64::MIN_POSITIVE)).into(),
                max_gap.into(),
                env_ok.into(),
                "ok".into(),
            ])
        })();
        match row {
            Ok(r) => table.push(r),
            Err(err) => {
                let mut r = vec![Cell::from(n)];
                r.extend((0..8).map(|_| Cell::Num(f64::NAN)));
                r.push(false.into());
                r.push(failed(&err));
                table.push(r);
            }
        }
    }
    report.tables.push(table);
    Ok(report)
}

/// Upper-bound pipeline: the prelimit value of the scheduling policy built from
/// a continuous near-optimal control, its excursions and its drift certificate.
pub fn upperbound_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    let p = &cfg.params;
    let e = &cfg.experiment;
    let hjb = hjb_solve(p, &cfg.grid()?, &cfg.hjb_options())?;
    let v = near_optimal_control(cfg, &hjb)?;
    let opts = cfg.spectral_options();
    let z = LyapunovZ::new(e.eps0, e.eps1, p.mu.clone())?;
    let mut report = Report::new("upper bound");
    report.note("hjb_value", hjb.value);
    report.note("near_optimal_radius", e.near_optimal_radius);
    report.note("mollifier_k", e.mollifier_k);
    let mut table = Table::new(
        "upper_bound",
        &[
            "n",
            "value_under_control",
            "optimal_value",
            "dominance_ok",
            "gap_to_hjb",
            "excursion_fraction",
            "delta1",
            "delta2",
            "drift_c0",
            "drift_c1",
            "drift_certified",
            "status",
        ],
    );
    for &n in &e.n_list {
        let row = (|| -> Result<Vec<Cell>> {
            let sys = SystemN::canonical(p, n)?;
            let lattice = LatticeBox::with_margin(&sys, e.margin)?;
            let under = prelimit_value_under_markov_control(&v, &sys, &lattice, &opts)?.value;
            let best = prelimit_optimize(&sys, &lattice, &opts)?.solution.value;
            let scp = scp_from_markov_control(&v, &sys)?;
            let x0 = sys.center();
            let stats = cfg.exec().map(e.replications, |r| -> Result<_> {
                let seed = rng::derive_seed(e.seed, ((n as u64) << 32) | r as u64);
                let path = simulate(&sys, &scp, &x0, e.horizon, seed)?;
                boundary_excursion_stats(&path, &scp)
            });
            let mut frac = Accum::default();
            let mut d1 = Accum::default();
            let mut d2 = Accum::default();
            for s in stats {
                let s = s?;
                frac.add(s.fraction_outside);
                d1.add(s.delta1);
                d2.add(s.delta2);
            }
            let reps = e.replications as f64;
            let drift = drift_report(
                &sys,
                &scp,
                &TiltControl::Identity,
                &lattice,
                e.shell[0],
                e.shell[1],
                &z,
                &DriftOptions {
                    certificate: None,
                    exec: cfg.exec(),
                },
            )?;
            let slack = 10.0 * e.spectral_tol * best.abs().max(1.0);
            Ok(vec![
                n.into(),
                under.into(),
                best.into(),
                (under >= best - slack).into(),
                (under - hjb.value).into(),
                (frac.value() / reps).into(),
                (d1.value() / reps).into(),
                (d2.value() / reps).into(),
                drift.c0.into(),
                drift.c1.into(),
                drift.certified().into(),
                "ok".into(),
            ])
        })();
        match row {
            Ok(r) => table.push(r),
            Err(err) => {
                let nan = || Cell::Num(f64::NAN);
                table.push(vec![
                    n.into(),
                    nan(),
                    nan(),
                    false.into(),
                    nan(),
                    nan(),
                    nan(),
                    nan(),
                    nan(),
                    nan(),
                    false.into(),
                    failed(&err),
                ]);
            }
        }
    }
    report.tables.push(table);
    Ok(report)
}

fn brownian_functional(a: Vec<f64>, b: f64) -> PathFunctional {
    PathFunctional::new(
        move |path| {
            let last = path.terminal();
            let lin: f64 = a.iter().zip(last).map(|(x, y)| x * y).sum();
            let horizon = path.dt * (path.len() - 1) as f64;
            let mut avg = 0.0;
            for k in 1..path.len() {
                avg += path.at(k).iter().map(|v| v.abs()).sum::<f64>() * path.dt;
            }
            lin + b * avg / horizon
        },
        3.0,
    )
}

fn poisson_functional(a: f64, b: f64, rate: f64) -> CountFunctional {
    CountFunctional::new(
        move |jumps, horizon| {
            let centered = (jumps.len() as f64 - rate * horizon) / horizon;
            let early = jumps.iter().filter(|&&t| t < 0.5 * horizon).count() as f64 / horizon;
            a * centered + b * early
        },
        3.0,
    )
}

/// Random tilt batteries for both variational lower bounds. Every tilt gets
/// its own functional, with matched replication seeds between the tilted and
/// direct estimates.
pub fn variational_battery(cfg: &ExperimentConfig) -> Result<(Report, Vec<Certificate>)> {
    let e = &cfg.experiment;
    let mut gen = rng::stream(e.seed, u64::MAX);
    let d = 2;
    let mesh = Mesh {
        horizon: e.bm_horizon,
        steps: e.bm_steps,
        d,
    };
    let mut certs = Vec::new();
    let mut kinds = Vec::new();
    for k in 0..e.tilts {
        let a: Vec<f64> = (0..d).map(|_| gen.random_range(-1.0..1.0)).collect();
        let b = gen.random_range(-0.5..0.5);
        let g = brownian_functional(a, b);
        let (kind, tilt) = match k % 3 {
            0 => ("constant", BrownianTilt::Constant((0..d).map(|_| gen.random_range(-1.5..1.5)).collect())),
            1 => (
                "table",
                BrownianTilt::Table {
                    dt: e.bm_horizon / 5.0,
                    values: (0..5)
                        .map(|_| (0..d).map(|_| gen.random_range(-1.5..1.5)).collect())
                        .collect(),
                },
            ),
            _ => {
                let theta = gen.random_range(0.0..2.0);
                let c: Vec<f64> = (0..d).map(|_| gen.random_range(-1.0..1.0)).collect();
                (
                    "feedback",
                    BrownianTilt::feedback(move |_, x, out| {
                        for i in 0..out.len() {
                            out[i] = (c[i] - theta * x[i]).clamp(-3.0, 3.0);
                        }
                    }),
                )
            }
        };
        let mc = McOptions {
            replications: e.mc_replications,
            seed: rng::derive_seed(e.seed, k as u64),
            exec: cfg.exec(),
        };
        let lower = bm_lower_bound_certificate(&g, &tilt, &mesh, &mc)?;
        let direct = bm_direct_log_mgf(&g, &mesh, &mc);
        certs.push(Certificate::new(format!("bm-{k}"), lower, direct));
        kinds.push(kind);
    }
    for k in 0..e.tilts {
        let a = gen.random_range(-1.0..1.0);
        let b = gen.random_range(-0.5..0.5);
        let g = poisson_functional(a, b, e.poisson_rate);
        let (kind, tilt) = match k % 3 {
            0 => ("constant", PoissonTilt::Constant(gen.random_range(0.3..3.0))),
            1 => (
                "table",
                PoissonTilt::Table {
                    dt: e.poisson_horizon / 5.0,
                    values: (0..5).map(|_| gen.random_range(0.3..3.0)).collect(),
                },
            ),
            _ => {
                let base = gen.random_range(0.5..2.0);
                let slope = gen.random_range(-0.3..0.3);
                (
                    "feedback",
                    PoissonTilt::Feedback {
                        f: std::sync::Arc::new(move |_, count| (base + slope * count as f64).clamp(0.2, 4.0)),
                        max_hold: e.poisson_horizon / 10.0,
                    },
                )
            }
        };
        let mc = McOptions {
            replications: e.mc_replications,
            seed: rng::derive_seed(e.seed, (1 << 32) | k as u64),
            exec: cfg.exec(),
        };
        let lower = poisson_lower_bound_certificate(&g, &tilt, e.poisson_rate, e.poisson_horizon, &mc)?;
        let direct = poisson_direct_log_mgf(&g, e.poisson_rate, e.poisson_horizon, &mc);
        certs.push(Certificate::new(format!("poisson-{k}"), lower, direct));
        kinds.push(kind);
    }
    let mut table = Table::new(
        "certificates",
        &["tilt_id", "kind", "estimate", "stderr", "direct", "direct_stderr", "heavy_tail", "verdict"],
    );
    for (c, kind) in certs.iter().zip(&kinds) {
        table.push(vec![
            c.tilt_id.clone().into(),
            (*kind).into(),
            c.estimate.into(),
            c.stderr.into(),
            c.direct.into(),
            c.direct_stderr.into(),
            c.heavy_tail.into(),
            (if c.verdict { "pass" } else { "fail" }).into(),
        ]);
    }
    let mut report = Report::new("variational certificates");
    report.note("certificates", certs.len());
    report.note("violations", certs.iter().filter(|c| !c.verdict).count());
    report.tables.push(table);
    Ok((report, certs))
}

/// Closed-form FCLT sweep over `(c, lambda, n)`; `log_ratio` is
/// `ln(gap_n / gap_next)` for the next `n` of the list.
pub fn fclt_sweep(cfg: &ExperimentConfig) -> Result<Report> {
    let e = &cfg.experiment;
    let mut table = Table::new(
        "fclt",
        &["c", "lambda", "n", "poisson_side", "bm_side", "gap", "bound", "holds", "log_ratio"],
    );
    let mut all = true;
    for &c in &e.fclt_c {
        for &lam in &e.fclt_lambda {
            let checks = e
                .fclt_n
                .iter()
                .map(|&n| fclt_linear_check(c, lam, n, 1.0))
                .collect::<Result<Vec<_>>>()?;
            for (k, ch) in checks.iter().enumerate() {
                let ratio = checks
                    .get(k + 1)
                    .map_or(f64::NAN, |next| (ch.gap() / next.gap()).ln());
                all &= ch.holds;
                table.push(vec![
                    c.into(),
                    lam.into(),
                    e.fclt_n[k].into(),
                    ch.poisson_side.into(),
                    ch.bm_side.into(),
                    ch.gap().into(),
                    ch.bound.into(),
                    ch.holds.into(),
                    ratio.into(),
                ]);
            }
        }
    }
    let mut report = Report::new("fclt closed form");
    report.note("all_hold", all);
    report.tables.push(table);
    Ok(report)
}

/// Drift certificates under priority fill with the identity tilt.
pub fn drift_check(cfg: &ExperimentConfig) -> Result<Report> {
    let p = &cfg.params;
    let e = &cfg.experiment;
    let z = LyapunovZ::new(e.eps0, e.eps1, p.mu.clone())?;
    let mut table = Table::new(
        "drift",
        &["n", "states", "sup_drift", "c0", "c1", "increment_bound", "holds", "certified"],
    );
    for &n in &e.n_list {
        let sys = SystemN::canonical(p, n)?;
        let lattice = LatticeBox::with_margin(&sys, e.margin)?;
        let r = drift_report(
            &sys,
            &PriorityFill { n },
            &TiltControl::Identity,
            &lattice,
            e.shell[0],
            e.shell[1],
            &z,
            &DriftOptions {
                certificate: None,
                exec: cfg.exec(),
            },
        )?;
        table.push(vec![
            n.into(),
            r.states.into(),
            r.sup_drift.into(),
            r.c0.into(),
            r.c1.into(),
            r.increment_bound.into(),
            r.holds.into(),
            r.certified().into(),
        ]);
    }
    let mut report = Report::new("drift certificates");
    report.note("shell_inner", e.shell[0]);
    report.note("shell_outer", e.shell[1]);
    report.tables.push(table);
    Ok(report)
}

/// One path of the prelimit system under priority fill from the centre.
pub fn simulate_run(cfg: &ExperimentConfig) -> Result<Report> {
    let p = &cfg.params;
    let e = &cfg.experiment;
    let sys = SystemN::canonical(p, e.simulate_n)?;
    let x0 = sys.center();
    let path = simulate(&sys, &PriorityFill { n: sys.n }, &x0, e.simulate_horizon, e.seed)?;
    let d = sys.d();
    let mut cols: Vec<String> = vec!["time".into(), "clock".into()];
    cols.extend((1..=d).map(|i| format!("x{i}")));
    cols.extend((1..=d).map(|i| format!("z{i}")));
    cols.extend(["cost".to_string(), "entropy".to_string()]);
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut table = Table::new("path", &col_refs);
    for k in 0..path.times.len() {
        let mut row: Vec<Cell> = vec![path.times[k].into(), path.clocks[k].map_or("-".to_string(), Clock::label).into()];
        row.extend(path.state(k).iter().map(|&v| Cell::Int(v as i64)));
        row.extend(path.allocation(k).iter().map(|&v| Cell::Int(v as i64)));
        row.push(path.cost[k].into());
        row.push(path.entropy[k].into());
        table.push(row);
    }
    let mut report = Report::new("simulation");
    report.note("n", sys.n);
    report.note("horizon", e.simulate_horizon);
    report.note("events", path.events());
    report.note("total_cost", path.total_cost);
    report.note("time_average_cost", path.total_cost / e.simulate_horizon);
    report.tables.push(table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_mass_and_marginals() {
        let mut h = OccupationHistogram::new(vec![0.0, 0.0], 0.5, vec![4, 3]).unwrap();
        h.add(&[0.1, 0.1], 1.0);
        h.add(&[1.9, 1.4], 0.25);
        h.add(&[5.0, 0.0], 0.5);
        assert_eq!(h.total(), 1.75);
        assert_eq!(h.overflow(), 0.5);
        let m0: f64 = h.marginal(0).iter().sum();
        let m1: f64 = h.marginal(1).iter().sum();
        assert_eq!(m0, 1.25);
        assert_eq!(m1, 1.25);
        let c = h.coarsen(2).unwrap();
        assert_eq!(c.marginal(0).iter().sum::<f64>(), 1.25);
        assert_eq!(c.total(), h.total());
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        let err = "xlsx".parse::<Format>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("csv") && msg.contains("txt"));
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut r = Report::new("t");
        r.tables.push(Table::new("x", &["a", "b"]));
        let mut buf = Vec::new();
        write_report(&r, &mut buf, Format::Csv, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec!["a,b"]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let text = "[params]\nlambda=[1.0]\nlambda_hat=[0.0]\nmu=[1.0]\nmu_hat=[0.0]\ngamma=[1.0]\nkappa=[0.1]\n[experiment]\nbogus = 1\n";
        assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))));
        let ok = text.replace("bogus = 1", "n_list = [4]");
        let cfg = ExperimentConfig::from_toml_str(&ok).unwrap();
        assert_eq!(cfg.experiment.n_list, vec![4]);
        assert!(cfg.preamble()[0].starts_with("config: "));
    }
}
