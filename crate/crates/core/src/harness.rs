//! Experiment driver: ground-truth states, the sweep over measurement levels
//! `m`, convergence tables and recovered-law reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{fit_linear_law, to_expression, Expression, InputBox, LinearLawFit};
use crate::field::{ddt, ddx, l2_spacetime, sample, Grid, StateField};
use crate::measure::{add_noise, analyze_reduced_modes, operator_gap, reconstruct};
use crate::optim::{
    alternate, schedules_for, write_cycle_log, AdamOptions, AlternateOptions, HoppingOptions, Objective,
    ObjectiveConfig, ObjectiveParts,
};
use crate::symnet::{batch_forward, default_parfam_spec, Checkpoint, NetworkSpec, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// `u = (x + b t) exp(a t)`, solving `u_t = a u + b u_x`.
    Advection,
    /// `u = exp(x - a t)`, solving `u_t = c_u u + c_ux u_x` whenever
    /// `c_u + c_ux = -a`.
    Exponential,
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advection" => Ok(Experiment::Advection),
            "exponential" => Ok(Experiment::Exponential),
            _ => Err(Error::UnknownExperiment(s.to_string())),
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Experiment::Advection => "advection",
            Experiment::Exponential => "exponential",
        })
    }
}

/// How the law parameters are initialized for each `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInit {
    Random,
    /// The reference law, encoded on the skip path.
    TrueLaw,
}

/// How the state is initialized from the measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateInit {
    /// Cell coefficients interpolated linearly in time between cell
    /// midpoints.
    Interpolated,
    /// The sampled ground truth (diagnostics only).
    GroundTruth,
}

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: Experiment,
    pub a: f64,
    pub b: f64,
    pub grid: Grid,
    #[serde(rename = "M")]
    pub big_m: usize,
    /// Measurement levels to run; empty means `M/2, ..., M-1`.
    pub m_values: Vec<usize>,
    pub seed: u64,
    pub quick: bool,
    pub out_dir: PathBuf,
    pub prune_threshold: f64,
    pub reg_u_weight: f64,
    pub reg_theta_weight: f64,
    /// Rescale network inputs by the magnitude of the initial state and its
    /// gradient.
    pub scale_inputs: bool,
    /// Rescale the network output by the magnitude of the initial state's
    /// time derivative.
    pub scale_output: bool,
    /// Run the u-step on the state divided by its initial magnitude.
    pub scale_state: bool,
    pub theta_init: ThetaInit,
    pub state_init: StateInit,
    /// Overrides of the quick/full optimizer budgets.
    pub cycles: Option<usize>,
    pub n_hops: Option<usize>,
    pub adam_epochs: Option<usize>,
    pub bfgs_iters: Option<usize>,
    pub step_scale: f64,
    pub temperature: f64,
    pub adam_lr: f64,
    pub fit_samples: usize,
    pub write_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            experiment: Experiment::Advection,
            a: 1.0,
            b: 2.0,
            grid: Grid::default(),
            big_m: 100,
            m_values: Vec::new(),
            seed: 42,
            quick: false,
            out_dir: PathBuf::from("out"),
            prune_threshold: crate::extract::DEFAULT_PRUNE_THRESHOLD,
            reg_u_weight: 1.0,
            reg_theta_weight: 1.0,
            scale_inputs: true,
            scale_output: true,
            scale_state: false,
            theta_init: ThetaInit::Random,
            state_init: StateInit::Interpolated,
            cycles: None,
            n_hops: None,
            adam_epochs: None,
            bfgs_iters: None,
            step_scale: 0.5,
            temperature: 1.0,
            adam_lr: AdamOptions::default().lr,
            fit_samples: 2000,
            write_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.grid.validate()?;
        if self.big_m == 0 || self.big_m % 2 != 0 {
            return Err(Error::Config(format!("M must be even and positive, got {}", self.big_m)));
        }
        if let Some(m) = self.m_values.iter().find(|m| **m == 0 || **m > self.big_m) {
            return Err(Error::Config(format!("m = {m} outside [1, M]")));
        }
        if !(self.prune_threshold.is_finite() && self.prune_threshold >= 0.0) {
            return Err(Error::Config("prune_threshold must be nonnegative".into()));
        }
        if self.fit_samples < 3 {
            return Err(Error::TooFewSamples { needed: 3, got: self.fit_samples });
        }
        Ok(())
    }

    pub fn m_range(&self) -> Vec<usize> {
        if self.m_values.is_empty() {
            (self.big_m / 2..self.big_m).collect()
        } else {
            self.m_values.clone()
        }
    }

    pub fn optimizer(&self) -> AlternateOptions {
        let mut o = if self.quick { AlternateOptions::quick() } else { AlternateOptions::full() };
        if let Some(c) = self.cycles {
            o.cycles = c;
        }
        if let Some(h) = self.n_hops {
            o.hopping.n_hops = h;
        }
        if let Some(e) = self.adam_epochs {
            o.adam.max_epochs = e;
        }
        if let Some(b) = self.bfgs_iters {
            o.hopping.bfgs_iters = b;
        }
        o.hopping = HoppingOptions { step_scale: self.step_scale, temperature: self.temperature, ..o.hopping };
        o.adam.lr = self.adam_lr;
        o
    }

    /// Spatial modes retained at level `m`: `m`, capped at `n_x - 1`.
    pub fn modes_for(&self, m: usize) -> usize {
        m.min(self.grid.n_x - 1)
    }
}

/// The reference law `f` and its admissible family.
#[derive(Clone, Debug, PartialEq)]
pub enum LawFamily {
    /// Unique law `c_u u + c_ux u_x`.
    Linear { c_u: f64, c_ux: f64 },
    /// Any `c_u u + c_ux u_x` with `c_u + c_ux = sum`.
    SumConstraint { sum: f64 },
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub u: StateField,
    pub law: Expression,
    pub family: LawFamily,
}

pub fn ground_truth(cfg: &ExperimentConfig) -> Result<GroundTruth> {
    let (a, b) = (cfg.a, cfg.b);
    match cfg.experiment {
        Experiment::Advection => Ok(GroundTruth {
            u: sample(&cfg.grid, |t, x| (x + b * t) * (a * t).exp())?,
            law: Expression::linear(0.0, a, b),
            family: LawFamily::Linear { c_u: a, c_ux: b },
        }),
        Experiment::Exponential => Ok(GroundTruth {
            u: sample(&cfg.grid, |t, x| (x - a * t).exp())?,
            law: Expression::linear(0.0, -a, 0.0),
            family: LawFamily::SumConstraint { sum: -a },
        }),
    }
}

/// `||u_t - f(u, u_x)||` with stencil derivatives of `u`.
pub fn law_residual(u: &StateField, f: impl Fn(f64, f64) -> f64) -> f64 {
    let ut = ddt(u);
    let ux = ddx(u);
    let r: Vec<f64> = (0..u.values().len()).map(|k| ut.values()[k] - f(u.values()[k], ux.values()[k])).collect();
    l2_spacetime(&StateField::from_values(*u.grid(), r).expect("finite residual"))
}

/// The realized range of `(u, u_x)` of a state.
pub fn realized_box(u: &StateField) -> Result<InputBox> {
    let ux = ddx(u);
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
    InputBox::new(range(u.values()), range(ux.values()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub f_deviation: f64,
    pub u_deviation: f64,
    pub expression: String,
    pub parts: ObjectiveParts,
    pub best_cycle: usize,
    pub wall_time_s: f64,
}

pub const CONVERGENCE_HEADER: [&str; 11] = [
    "m",
    "f_deviation",
    "u_deviation",
    "total",
    "pde_residual",
    "data_misfit",
    "reg_u",
    "reg_theta",
    "best_cycle",
    "expression",
    "wall_time_s",
];

/// Everything produced for one measurement level.
#[derive(Clone, Debug)]
pub struct LevelResult {
    pub row: ConvergenceRow,
    pub spec: NetworkSpec,
    pub theta: ParameterVector,
    pub u: StateField,
    pub expression: Expression,
    pub history: Vec<crate::optim::CycleRecord>,
}

fn level_seed(seed: u64, m: usize) -> u64 {
    seed ^ m as u64
}

/// Runs problem `(P^m)` for one level against the given ground truth.
pub fn run_level(cfg: &ExperimentConfig, truth: &GroundTruth, m: usize) -> Result<LevelResult> {
    let start = Instant::now();
    let sched = schedules_for(m, cfg.big_m)?;
    let n_modes = cfg.modes_for(m);
    if n_modes < m {
        log::warn!("m = {m}: only {n_modes} cosine modes are resolvable on {} nodes; capping", cfg.grid.n_x);
    }
    let clean = analyze_reduced_modes(&truth.u, m, n_modes)?;
    let seed = level_seed(cfg.seed, m);
    let y = add_noise(&clean, sched.delta, seed)?;
    let u0 = match cfg.state_init {
        StateInit::Interpolated => reconstruct(&y),
        StateInit::GroundTruth => truth.u.clone(),
    };

    let mut spec = default_parfam_spec(2);
    if cfg.scale_inputs {
        let su = u0.max_abs();
        let sx = ddx(&u0).max_abs();
        spec.input_scale = vec![if su > 0.0 { su } else { 1.0 }, if sx > 0.0 { sx } else { 1.0 }];
    }
    if cfg.scale_output {
        let st = ddt(&u0).max_abs();
        spec.output_scale = if st > 0.0 { st } else { 1.0 };
    }
    let theta0 = match cfg.theta_init {
        ThetaInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
            spec.init_theta(&mut rng)?
        }
        ThetaInit::TrueLaw => {
            let (cu, cux) = match truth.family {
                LawFamily::Linear { c_u, c_ux } => (c_u, c_ux),
                LawFamily::SumConstraint { sum } => (sum, 0.0),
            };
            spec.theta_for_polynomial_law(&[(vec![1, 0], cu), (vec![0, 1], cux)])?
        }
    };

    let mut ocfg = ObjectiveConfig::new(spec.clone(), y, &sched);
    ocfg.reg_u_weight = cfg.reg_u_weight;
    ocfg.reg_theta_weight = cfg.reg_theta_weight;
    let obj = Objective::new(ocfg)?;
    let mut opts = cfg.optimizer();
    if cfg.scale_state {
        let s = u0.max_abs();
        opts.state_scale = if s > 0.0 { s } else { 1.0 };
    }
    let state = alternate(&u0, &theta0, &obj, &opts, seed)?;

    let ux_true = ddx(&truth.u);
    let ut_true = ddt(&truth.u);
    let inputs: Vec<Vec<f64>> =
        truth.u.values().iter().zip(ux_true.values()).map(|(a, b)| vec![*a, *b]).collect();
    let f = batch_forward(&spec, &state.theta, &inputs)?;
    let fd: Vec<f64> = f.iter().zip(ut_true.values()).map(|(a, b)| a - b).collect();
    let f_deviation = l2_spacetime(&StateField::from_values(cfg.grid, fd)?);
    let u_deviation = l2_spacetime(&state.u.axpy(-1.0, &truth.u));
    let expression = to_expression(&spec, &state.theta, cfg.prune_threshold)?;
    let row = ConvergenceRow {
        m,
        f_deviation,
        u_deviation,
        expression: expression.to_string(),
        parts: state.parts,
        best_cycle: state.best_cycle,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    log::info!("m = {m}: f-dev {f_deviation:.4e}, u-dev {u_deviation:.4e}, law {}", row.expression);
    Ok(LevelResult { row, spec, theta: state.theta, u: state.u, expression, history: state.history })
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<ConvergenceRow>,
    pub failures: Vec<(usize, String)>,
    /// The level result of the largest successful `m`.
    pub last: Option<LevelResult>,
    pub report: String,
}

impl SweepResult {
    /// More than 20% of the levels failed.
    pub fn failed(&self) -> bool {
        5 * self.failures.len() > self.rows.len() + self.failures.len()
    }
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CONVERGENCE_HEADER)?;
    for r in rows {
        let p = &r.parts;
        out.write_record([
            r.m.to_string(),
            r.f_deviation.to_string(),
            r.u_deviation.to_string(),
            p.total().to_string(),
            p.pde_residual.to_string(),
            p.data_misfit.to_string(),
            p.reg_u.to_string(),
            p.reg_theta.to_string(),
            r.best_cycle.to_string(),
            r.expression.clone(),
            format!("{:.3}", r.wall_time_s),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every level, writing `convergence.csv`, `report.txt` and per-level
/// checkpoints into `out_dir` (when `write` is set). Failing levels are
/// logged and skipped.
pub fn run_sweep(cfg: &ExperimentConfig, write: bool) -> Result<SweepResult> {
    cfg.validate()?;
    let truth = ground_truth(cfg)?;
    if write {
        fs::create_dir_all(&cfg.out_dir)?;
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut last = None;
    for m in cfg.m_range() {
        match run_level(cfg, &truth, m) {
            Ok(res) => {
                if write && cfg.write_checkpoints {
                    let ck = Checkpoint::new(res.spec.clone(), res.theta.clone());
                    fs::write(cfg.out_dir.join(format!("checkpoint_m{m}.json")), ck.to_json()?)?;
                    res.u.write_csv(fs::File::create(cfg.out_dir.join(format!("state_m{m}.csv")))?)?;
                    write_cycle_log(&res.history, fs::File::create(cfg.out_dir.join(format!("cycles_m{m}.csv")))?)?;
                }
                rows.push(res.row.clone());
                last = Some(res);
                if write {
                    write_convergence_csv(&rows, fs::File::create(cfg.out_dir.join("convergence.csv"))?)?;
                }
            }
            Err(e) => {
                log::error!("m = {m} failed: {e}");
                failures.push((m, e.to_string()));
            }
        }
    }
    let report = match &last {
        Some(res) => render_report(&identifiability_report(&rows, res, cfg, &truth)?, &rows, &failures, cfg),
        None => "no level completed\n".to_string(),
    };
    if write {
        write_convergence_csv(&rows, fs::File::create(cfg.out_dir.join("convergence.csv"))?)?;
        fs::write(cfg.out_dir.join("report.txt"), &report)?;
    }
    Ok(SweepResult { rows, failures, last, report })
}

/// Recovered-law diagnostics for the final level.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentifiabilityReport {
    pub m: usize,
    pub expression: String,
    pub fit: LinearLawFit,
    pub input_box: InputBox,
    pub kind: IdentifiabilityKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdentifiabilityKind {
    Linear { dev_u: f64, dev_ux: f64 },
    SumConstraint { constraint_dev: f64, l1: f64 },
}

/// Fits the recovered law onto `span{1, u, u_x}` over the realized range of
/// the true state and compares with the reference family.
pub fn identifiability_report(
    rows: &[ConvergenceRow],
    last: &LevelResult,
    cfg: &ExperimentConfig,
    truth: &GroundTruth,
) -> Result<IdentifiabilityReport> {
    if rows.is_empty() {
        return Err(Error::Config("no rows to report".into()));
    }
    let bx = realized_box(&truth.u)?;
    let fit = fit_linear_law(&last.expression, &bx, cfg.fit_samples)?;
    Ok(IdentifiabilityReport {
        m: last.row.m,
        expression: last.row.expression.clone(),
        fit,
        input_box: bx,
        kind: identifiability_of(&fit, &truth.family),
    })
}

pub fn identifiability_of(fit: &LinearLawFit, family: &LawFamily) -> IdentifiabilityKind {
    match *family {
        LawFamily::Linear { c_u, c_ux } => {
            IdentifiabilityKind::Linear { dev_u: (fit.c_u - c_u).abs(), dev_ux: (fit.c_ux - c_ux).abs() }
        }
        LawFamily::SumConstraint { sum } => IdentifiabilityKind::SumConstraint {
            constraint_dev: (fit.c_u + fit.c_ux - sum).abs(),
            l1: fit.c_u.abs() + fit.c_ux.abs(),
        },
    }
}

pub fn render_report(
    rep: &IdentifiabilityReport,
    rows: &[ConvergenceRow],
    failures: &[(usize, String)],
    cfg: &ExperimentConfig,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {} (a = {}, b = {})", cfg.experiment, cfg.a, cfg.b);
    let _ = writeln!(
        s,
        "mode: {}, M = {}, seed = {}, grid {} x {}",
        if cfg.quick { "quick" } else { "full" },
        cfg.big_m,
        cfg.seed,
        cfg.grid.n_t,
        cfg.grid.n_x
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>5} {:>14} {:>14}  law", "m", "f_deviation", "u_deviation");
    for r in rows {
        let _ = writeln!(s, "{:>5} {:>14.6e} {:>14.6e}  {}", r.m, r.f_deviation, r.u_deviation, r.expression);
    }
    for (m, e) in failures {
        let _ = writeln!(s, "{m:>5} failed: {e}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "recovered law at m = {}: {}", rep.m, rep.expression);
    let b = &rep.input_box;
    let _ = writeln!(
        s,
        "linear fit on u in [{:.4}, {:.4}], u_x in [{:.4}, {:.4}]: c0 = {:.6}, c_u = {:.6}, c_ux = {:.6}, residual rms = {:.6}",
        b.u.0, b.u.1, b.ux.0, b.ux.1, rep.fit.c0, rep.fit.c_u, rep.fit.c_ux, rep.fit.residual
    );
    match rep.kind {
        IdentifiabilityKind::Linear { dev_u, dev_ux } => {
            let _ = writeln!(s, "|c_u - a| = {dev_u:.6}, |c_ux - b| = {dev_ux:.6}");
        }
        IdentifiabilityKind::SumConstraint { constraint_dev, l1 } => {
            let _ = writeln!(s, "|c_u + c_ux + a| = {constraint_dev:.6}, |c_u| + |c_ux| = {l1:.6}");
        }
    }
    s
}

/// Operator gap of the true state at each level.
pub fn gap_sweep(cfg: &ExperimentConfig, levels: &[usize]) -> Result<Vec<(usize, f64)>> {
    let truth = ground_truth(cfg)?;
    levels.iter().map(|&m| Ok((m, operator_gap(&truth.u, m)?))).collect()
}
