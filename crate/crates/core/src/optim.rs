//! The all-at-once objective and the optimizers that minimize it.
//!
//! ```text
//! J(u, theta) = lambda * ||u_t - f_theta(u, u_x)||^2
//!             + mu * ||K^m u - y^m||^2
//!             + w_u * ||u||_H^2 + w_theta * |numerators(theta)|_1
//! ```
//!
//! The law parameters are updated by basin hopping around BFGS with the
//! state fixed, the state by ADAM with the law fixed, and the two steps are
//! alternated. Inside BFGS the L1 term is replaced by the smooth surrogate
//! `sqrt(c^2 + L1_SMOOTHING)`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ddt, ddt_adjoint, ddx, ddx_adjoint, sobolev_parts, Grid, StateField};
use crate::measure::{MeasurementRecord, ReducedOperator};
use crate::symnet::{Network, NetworkSpec, ParameterVector};

pub const L1_SMOOTHING: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub m: usize,
    pub big_m: usize,
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
}

/// `lambda = m^3 / M`, `mu = m / M`, `delta = 0.1 M / m^3`.
pub fn schedules_for(m: usize, big_m: usize) -> Result<Schedules> {
    if m == 0 || m > big_m {
        return Err(Error::Config(format!("need 1 <= m <= M, got m={m}, M={big_m}")));
    }
    let (mf, bm) = (m as f64, big_m as f64);
    Ok(Schedules { m, big_m, lambda: mf.powi(3) / bm, mu: mf / bm, delta: 0.1 * bm / mf.powi(3) })
}

#[derive(Clone, Debug)]
pub struct ObjectiveConfig {
    pub spec: NetworkSpec,
    pub grid: Grid,
    pub y: MeasurementRecord,
    pub lambda: f64,
    pub mu: f64,
    pub reg_u_weight: f64,
    pub reg_theta_weight: f64,
}

impl ObjectiveConfig {
    pub fn new(spec: NetworkSpec, y: MeasurementRecord, schedules: &Schedules) -> Self {
        Self {
            spec,
            grid: *y.grid(),
            y,
            lambda: schedules.lambda,
            mu: schedules.mu,
            reg_u_weight: 1.0,
            reg_theta_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub pde_residual: f64,
    pub data_misfit: f64,
    pub reg_u: f64,
    pub reg_theta: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.pde_residual + self.data_misfit + self.reg_u + self.reg_theta
    }

    fn check(&self) -> Result<()> {
        for (v, part) in [
            (self.pde_residual, "pde_residual"),
            (self.data_misfit, "data_misfit"),
            (self.reg_u, "reg_u"),
            (self.reg_theta, "reg_theta"),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteObjective { part });
            }
        }
        Ok(())
    }
}

/// An objective with its measurement operator and quadrature precomputed.
#[derive(Clone, Debug)]
pub struct Objective {
    cfg: ObjectiveConfig,
    op: ReducedOperator,
    weights: Vec<f64>,
    numerator_mask: Vec<bool>,
}

impl Objective {
    pub fn new(cfg: ObjectiveConfig) -> Result<Self> {
        cfg.grid.validate()?;
        if cfg.y.grid() != &cfg.grid {
            return Err(Error::InvalidMeasurement("measurement grid differs from state grid".into()));
        }
        if cfg.spec.input_dim != 2 {
            return Err(Error::InvalidSpec(format!(
                "the law takes (u, u_x); input_dim must be 2, got {}",
                cfg.spec.input_dim
            )));
        }
        for (w, name) in [
            (cfg.lambda, "lambda"),
            (cfg.mu, "mu"),
            (cfg.reg_u_weight, "reg_u_weight"),
            (cfg.reg_theta_weight, "reg_theta_weight"),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        let op = ReducedOperator::new(&cfg.grid, cfg.y.m(), cfg.y.n_modes())?;
        let numerator_mask = cfg.spec.layout()?.numerator_mask();
        Ok(Self { weights: cfg.grid.weights(), op, numerator_mask, cfg })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.numerator_mask.len()
    }

    fn check_state(&self, u: &StateField) -> Result<()> {
        if u.grid() != &self.cfg.grid {
            return Err(Error::InvalidGrid("state grid differs from objective grid".into()));
        }
        Ok(())
    }

    /// Exact L1 norm of the numerator coefficients.
    pub fn l1_numerators(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.numerator_mask).filter(|(_, m)| **m).map(|(c, _)| c.abs()).sum()
    }

    fn smooth_l1(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let w = self.cfg.reg_theta_weight;
        let mut total = 0.0;
        let mut grad = grad;
        for (k, (c, m)) in theta.iter().zip(&self.numerator_mask).enumerate() {
            if !*m {
                continue;
            }
            let s = (c * c + L1_SMOOTHING).sqrt();
            total += s;
            if let Some(g) = grad.as_deref_mut() {
                g[k] += w * c / s;
            }
        }
        w * total
    }

    fn data_part(&self, u: &StateField) -> Result<(f64, Vec<f64>)> {
        let rec = self.op.apply(u)?;
        let r: Vec<f64> = rec.coeffs().iter().zip(self.cfg.y.coeffs()).map(|(a, b)| a - b).collect();
        let width = rec.cell_width();
        Ok((self.cfg.mu * width * r.iter().map(|v| v * v).sum::<f64>(), r))
    }

    fn reg_u_part(&self, u: &StateField) -> f64 {
        self.cfg.reg_u_weight * sobolev_parts(u).squared
    }

    /// All four parts, with the exact L1 norm for the law term.
    pub fn evaluate(&self, u: &StateField, theta: &ParameterVector) -> Result<ObjectiveParts> {
        self.check_state(u)?;
        let net = Network::new(&self.cfg.spec, theta)?;
        let ut = ddt(u);
        let ux = ddx(u);
        let mut tape = net.tape();
        let mut pde = 0.0;
        for k in 0..u.values().len() {
            let f = net.forward_tape(&[u.values()[k], ux.values()[k]], &mut tape);
            let r = ut.values()[k] - f;
            pde += self.weights[k] * r * r;
        }
        let parts = ObjectiveParts {
            pde_residual: self.cfg.lambda * pde,
            data_misfit: self.data_part(u)?.0,
            reg_u: self.reg_u_part(u),
            reg_theta: self.cfg.reg_theta_weight * self.l1_numerators(&theta.0),
        };
        parts.check()?;
        Ok(parts)
    }

    /// The law-parameter subproblem at a fixed state.
    pub fn theta_problem(&self, u: &StateField) -> Result<ThetaProblem<'_>> {
        self.check_state(u)?;
        let constant = self.data_part(u)?.0 + self.reg_u_part(u);
        Ok(ThetaProblem {
            obj: self,
            inputs: u.values().iter().zip(ddx(u).values()).map(|(a, b)| [*a, *b]).collect(),
            ut: ddt(u).into_values(),
            constant,
        })
    }

    /// Objective parts (exact L1) and the gradient with respect to every grid
    /// value of `u`.
    pub fn value_grad_u(&self, u: &StateField, theta: &ParameterVector) -> Result<(ObjectiveParts, StateField)> {
        self.check_state(u)?;
        let net = Network::new(&self.cfg.spec, theta)?;
        let n = u.values().len();
        let ut = ddt(u);
        let ux = ddx(u);
        let lambda = self.cfg.lambda;
        let mut tape = net.tape();
        let mut dfi = [0.0; 2];
        let mut pde = 0.0;
        // Adjoint seeds: g_t for u_t, g_u for u, g_x for u_x.
        let mut g_t = vec![0.0; n];
        let mut g_u = vec![0.0; n];
        let mut g_x = vec![0.0; n];
        for k in 0..n {
            let f = net.eval_with_input_grad(&[u.values()[k], ux.values()[k]], &mut tape, &mut dfi);
            let r = ut.values()[k] - f;
            let wr = self.weights[k] * r;
            pde += wr * r;
            let s = 2.0 * lambda * wr;
            g_t[k] = s;
            g_u[k] = -s * dfi[0];
            g_x[k] = -s * dfi[1];
        }
        let grid = self.cfg.grid;

        let (data, resid) = self.data_part(u)?;
        let width = self.cfg.y.cell_width();
        let scaled: Vec<f64> = resid.iter().map(|r| 2.0 * self.cfg.mu * width * r).collect();
        let data_grad = self.op.adjoint(&scaled);

        let sob = sobolev_parts(u);
        let wu = 2.0 * self.cfg.reg_u_weight;
        let weighted = |f: &StateField| -> StateField {
            let v = f.values().iter().zip(&self.weights).map(|(a, w)| wu * w * a).collect();
            StateField::from_values(grid, v).expect("finite")
        };
        if self.cfg.reg_u_weight > 0.0 {
            for k in 0..n {
                g_u[k] += wu * self.weights[k] * u.values()[k];
            }
            let sx = weighted(&sob.ux);
            let sxx = ddx_adjoint(&weighted(&sob.uxx));
            let st = weighted(&sob.ut);
            for k in 0..n {
                g_x[k] += sx.values()[k] + sxx.values()[k];
                g_t[k] += st.values()[k];
            }
        }

        let gt = ddt_adjoint(&StateField::from_values(grid, g_t).map_err(|_| Error::NonFiniteObjective { part: "pde_residual" })?);
        let gx = ddx_adjoint(&StateField::from_values(grid, g_x).map_err(|_| Error::NonFiniteObjective { part: "pde_residual" })?);
        let grad: Vec<f64> = (0..n)
            .map(|k| g_u[k] + gt.values()[k] + gx.values()[k] + data_grad.values()[k])
            .collect();
        let parts = ObjectiveParts {
            pde_residual: lambda * pde,
            data_misfit: data,
            reg_u: self.cfg.reg_u_weight * sob.squared,
            reg_theta: self.cfg.reg_theta_weight * self.l1_numerators(&theta.0),
        };
        parts.check()?;
        let grad = StateField::from_values(grid, grad).map_err(|_| Error::NonFiniteObjective { part: "gradient" })?;
        Ok((parts, grad))
    }
}

/// The objective as a function of the law parameters at a fixed state.
pub struct ThetaProblem<'a> {
    obj: &'a Objective,
    inputs: Vec<[f64; 2]>,
    ut: Vec<f64>,
    constant: f64,
}

impl ThetaProblem<'_> {
    /// Data misfit plus state regularization, which do not depend on theta.
    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// Total objective with the smooth L1 surrogate, and its gradient.
    pub fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let obj = self.obj;
        let pv = ParameterVector(theta.to_vec());
        let net = Network::new(&obj.cfg.spec, &pv)?;
        let mut tape = net.tape();
        let mut acc = net.accumulator();
        let lambda = obj.cfg.lambda;
        let mut pde = 0.0;
        for (k, x) in self.inputs.iter().enumerate() {
            let f = net.forward_tape(x, &mut tape);
            let r = self.ut[k] - f;
            let wr = obj.weights[k] * r;
            pde += wr * r;
            net.backward(&mut tape, -2.0 * lambda * wr, Some(&mut acc), None);
        }
        let mut grad = net.finish_gradient(&acc);
        let reg = obj.smooth_l1(theta, Some(&mut grad));
        let total = lambda * pde + reg + self.constant;
        if !total.is_finite() {
            return Err(Error::NonFiniteObjective { part: "pde_residual" });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteObjective { part: "gradient" });
        }
        Ok((total, grad))
    }
}

/// Outcome of a local minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iters: 100, grad_tol: 1e-8 }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates `f` at `x + alpha d`; failures count as `+inf`.
fn probe<F>(f: &mut F, x: &[f64], d: &[f64], alpha: f64) -> (Vec<f64>, f64, Vec<f64>)
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    match f(&xt) {
        Ok((v, g)) if v.is_finite() => (xt, v, g),
        _ => (xt, f64::INFINITY, vec![0.0; x.len()]),
    }
}

/// Strong-Wolfe line search (bracketing then zoom by safeguarded cubic
/// interpolation). Returns the accepted point or `None`.
fn wolfe_search<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    gx: &[f64],
    d: &[f64],
    alpha0: f64,
) -> Option<(f64, Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let dphi0 = dotp(gx, d);
    if dphi0 >= 0.0 {
        return None;
    }
    let mut a_prev = 0.0;
    let mut f_prev = fx;
    let mut d_prev = dphi0;
    let mut a = alpha0;
    for i in 0..30 {
        let (xt, ft, gt) = probe(f, x, d, a);
        if !ft.is_finite() {
            // Overshoot into an invalid region: shrink the trial step.
            a = a_prev + 0.1 * (a - a_prev);
            continue;
        }
        let dt = dotp(&gt, d);
        if ft > fx + C1 * a * dphi0 || (i > 0 && ft >= f_prev) {
            return zoom(f, x, fx, dphi0, d, (a_prev, f_prev, d_prev), (a, ft, dt));
        }
        if dt.abs() <= -C2 * dphi0 {
            return Some((a, xt, ft, gt));
        }
        if dt >= 0.0 {
            return zoom(f, x, fx, dphi0, d, (a, ft, dt), (a_prev, f_prev, d_prev));
        }
        a_prev = a;
        f_prev = ft;
        d_prev = dt;
        a *= 2.0;
    }
    None
}

fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    let d1c = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1c * d1c - d0 * d1;
    if disc < 0.0 {
        return None;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let t = x1 - (x1 - x0) * (d1 + d2 - d1c) / (d1 - d0 + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn zoom<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    dphi0: f64,
    d: &[f64],
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<(f64, Vec<f64>, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let mut best: Option<(f64, Vec<f64>, f64, Vec<f64>)> = None;
    for _ in 0..40 {
        let (a_lo, a_hi) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let width = a_hi - a_lo;
        if width <= 1e-16 * a_hi.max(1e-300) {
            break;
        }
        let mut a = if hi.1.is_finite() { cubic_min(lo, hi).unwrap_or(0.5 * (lo.0 + hi.0)) } else { 0.5 * (lo.0 + hi.0) };
        if !(a > a_lo + 0.1 * width && a < a_hi - 0.1 * width) {
            a = 0.5 * (lo.0 + hi.0);
        }
        let (xt, ft, gt) = probe(f, x, d, a);
        let dt = if ft.is_finite() { dotp(&gt, d) } else { f64::NAN };
        if !ft.is_finite() || ft > fx + C1 * a * dphi0 || ft >= lo.1 {
            hi = (a, ft, dt);
        } else {
            if dt.abs() <= -C2 * dphi0 {
                return Some((a, xt, ft, gt));
            }
            if ft < fx && best.as_ref().is_none_or(|b| ft < b.2) {
                best = Some((a, xt.clone(), ft, gt.clone()));
            }
            if dt * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, ft, dt);
        }
    }
    // Fall back to the best sufficient-decrease point seen, if any.
    best.or_else(|| {
        if lo.0 > 0.0 && lo.1 < fx {
            let (xt, ft, gt) = probe(f, x, d, lo.0);
            ft.is_finite().then_some((lo.0, xt, ft, gt))
        } else {
            None
        }
    })
}

/// BFGS with a strong-Wolfe line search. Returns the best iterate; the
/// objective at the result never exceeds the objective at `x0`.
pub fn bfgs<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<LocalResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut gx) = f(x0)?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective { part: "total" });
    }
    let mut x = x0.to_vec();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut first = true;
    let mut result = LocalResult { x: x.clone(), f: fx, iterations: 0, converged: false, line_search_failed: false };
    for it in 0..opts.max_iters {
        if norm(&gx) < opts.grad_tol {
            result.converged = true;
            break;
        }
        let mut d = vec![0.0; n];
        for i in 0..n {
            d[i] = -dotp(&h[i * n..(i + 1) * n], &gx);
        }
        if dotp(&d, &gx) >= 0.0 {
            // Lost descent; restart from steepest descent.
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                h[i * n + i] = 1.0;
                d[i] = -gx[i];
            }
            first = true;
        }
        let alpha0 = if first { (1.0 / norm(&gx)).min(1.0) } else { 1.0 };
        let Some((_, xn, fnew, gn)) = wolfe_search(&mut f, &x, fx, &gx, &d, alpha0) else {
            result.line_search_failed = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dotp(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if first {
                let scale = sy / dotp(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dotp(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dotp(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = xn;
        fx = fnew;
        gx = gn;
        result.iterations = it + 1;
        if fx < result.f {
            result.f = fx;
            result.x.clone_from(&x);
        }
        if s.iter().all(|v| *v == 0.0) {
            break;
        }
    }
    if !result.converged && norm(&gx) < opts.grad_tol && result.f == fx {
        result.converged = true;
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoppingOptions {
    pub n_hops: usize,
    pub step_scale: f64,
    pub temperature: f64,
    pub bfgs_iters: usize,
}

impl Default for HoppingOptions {
    fn default() -> Self {
        Self { n_hops: 100, step_scale: 0.5, temperature: 1.0, bfgs_iters: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopRecord {
    pub hop: usize,
    pub candidate: f64,
    pub current: f64,
    pub acceptance_probability: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoppingResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub accepted: usize,
    pub hops: Vec<HopRecord>,
}

/// Basin hopping: local minimization, then `n_hops` rounds of Gaussian
/// perturbation, local minimization and Metropolis acceptance. Returns the
/// best local minimum found.
pub fn basin_hopping_with_rng<F>(
    mut f: F,
    x0: &[f64],
    opts: &HoppingOptions,
    rng: &mut ChaCha8Rng,
) -> Result<HoppingResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let local = BfgsOptions { max_iters: opts.bfgs_iters, ..BfgsOptions::default() };
    let start = bfgs(&mut f, x0, &local)?;
    let mut cur = start.x.clone();
    let mut f_cur = start.f;
    let mut best = HoppingResult { x: start.x, f: start.f, accepted: 0, hops: Vec::new() };
    for hop in 0..opts.n_hops {
        let trial: Vec<f64> = cur
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + opts.step_scale * z
            })
            .collect();
        let u: f64 = rand::Rng::random(rng);
        let cand = match bfgs(&mut f, &trial, &local) {
            Ok(r) => r,
            Err(_) => {
                best.hops.push(HopRecord {
                    hop,
                    candidate: f64::INFINITY,
                    current: f_cur,
                    acceptance_probability: 0.0,
                    accepted: false,
                });
                continue;
            }
        };
        let p = if cand.f <= f_cur {
            1.0
        } else if opts.temperature > 0.0 {
            (-(cand.f - f_cur) / opts.temperature).exp()
        } else {
            0.0
        };
        let accepted = cand.f.is_finite() && (cand.f <= f_cur || u < p);
        best.hops.push(HopRecord { hop, candidate: cand.f, current: f_cur, acceptance_probability: p, accepted });
        if accepted {
            best.accepted += 1;
            cur.clone_from(&cand.x);
            f_cur = cand.f;
        }
        if cand.f < best.f {
            best.f = cand.f;
            best.x = cand.x;
        }
    }
    Ok(best)
}

pub fn basin_hopping<F>(f: F, x0: &[f64], opts: &HoppingOptions, seed: u64) -> Result<HoppingResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    basin_hopping_with_rng(f, x0, opts, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_epochs: 300, patience: 20, rel_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub epochs: usize,
    pub stopped_early: bool,
}

/// ADAM with best-so-far return and patience-based early stopping: training
/// stops once `patience` consecutive epochs fail to improve the best value by
/// more than `rel_tol` relative.
pub fn adam<F>(mut f: F, x0: &[f64], opts: &AdamOptions) -> Result<AdamResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let (mut fx, mut g) = f(&x)?;
    let mut best = AdamResult { x: x.clone(), f: fx, epochs: 0, stopped_early: false };
    let mut stale = 0;
    for epoch in 1..=opts.max_epochs {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { epoch });
        }
        let b1 = 1.0 - opts.beta1.powi(epoch as i32);
        let b2 = 1.0 - opts.beta2.powi(epoch as i32);
        for k in 0..n {
            m[k] = opts.beta1 * m[k] + (1.0 - opts.beta1) * g[k];
            v[k] = opts.beta2 * v[k] + (1.0 - opts.beta2) * g[k] * g[k];
            let mh = m[k] / b1;
            let vh = v[k] / b2;
            x[k] -= opts.lr * mh / (vh.sqrt() + opts.eps);
        }
        (fx, g) = f(&x)?;
        best.epochs = epoch;
        if fx < best.f - opts.rel_tol * best.f.abs() {
            best.f = fx;
            best.x.clone_from(&x);
            stale = 0;
        } else {
            if fx < best.f {
                best.f = fx;
                best.x.clone_from(&x);
            }
            stale += 1;
            if stale >= opts.patience {
                best.stopped_early = true;
                break;
            }
        }
    }
    Ok(best)
}

/// ADAM over the grid values of `u` with the law fixed.
/// ADAM over the state with `theta` fixed. The optimizer works on `u / scale`,
/// so the learning rate is measured in units of `scale`.
pub fn adam_fit_state(
    u0: &StateField,
    theta: &ParameterVector,
    obj: &Objective,
    opts: &AdamOptions,
    scale: f64,
) -> Result<StateField> {
    let grid = *u0.grid();
    let v0: Vec<f64> = u0.values().iter().map(|u| u / scale).collect();
    let res = adam(
        |v| {
            let u = StateField::from_values(grid, v.iter().map(|x| x * scale).collect())?;
            let (parts, g) = obj.value_grad_u(&u, theta)?;
            Ok((parts.total(), g.into_values().into_iter().map(|x| x * scale).collect()))
        },
        &v0,
        opts,
    )?;
    StateField::from_values(grid, res.x.into_iter().map(|x| x * scale).collect())
}

/// BFGS over theta with the state fixed.
pub fn bfgs_minimize(
    theta0: &ParameterVector,
    u: &StateField,
    obj: &Objective,
    max_iters: usize,
) -> Result<ParameterVector> {
    let problem = obj.theta_problem(u)?;
    let res = bfgs(|t| problem.value_grad(t), &theta0.0, &BfgsOptions { max_iters, ..BfgsOptions::default() })?;
    Ok(ParameterVector(res.x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternateOptions {
    pub cycles: usize,
    pub hopping: HoppingOptions,
    pub adam: AdamOptions,
    /// Unit in which the u-step measures the state (see [`adam_fit_state`]).
    pub state_scale: f64,
}

impl AlternateOptions {
    /// 100 cycles, 100 hops, 300 ADAM epochs.
    pub fn full() -> Self {
        Self { cycles: 100, hopping: HoppingOptions::default(), adam: AdamOptions::default(), state_scale: 1.0 }
    }

    /// 10 cycles, 10 hops, 50 ADAM epochs.
    pub fn quick() -> Self {
        Self {
            cycles: 10,
            hopping: HoppingOptions { n_hops: 10, ..HoppingOptions::default() },
            adam: AdamOptions { max_epochs: 50, ..AdamOptions::default() },
            state_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub parts: ObjectiveParts,
    pub accepted: usize,
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub u: StateField,
    pub theta: ParameterVector,
    pub parts: ObjectiveParts,
    pub best_cycle: usize,
    /// Cycle 0 is the starting point; cycle `k` is the state after the
    /// `k`-th theta-step/u-step pair.
    pub history: Vec<CycleRecord>,
}

/// Alternates basin hopping over theta and ADAM over u, returning the best
/// snapshot by total objective.
pub fn alternate(
    u0: &StateField,
    theta0: &ParameterVector,
    obj: &Objective,
    opts: &AlternateOptions,
    seed: u64,
) -> Result<OptimState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts0 = obj.evaluate(u0, theta0)?;
    let mut state = OptimState {
        u: u0.clone(),
        theta: theta0.clone(),
        parts: parts0,
        best_cycle: 0,
        history: vec![CycleRecord { cycle: 0, parts: parts0, accepted: 0 }],
    };
    let mut u = u0.clone();
    let mut theta = theta0.clone();
    for cycle in 1..=opts.cycles {
        let wrap = |e: Error| Error::Cycle { cycle, source: Box::new(e) };
        let problem = obj.theta_problem(&u).map_err(wrap)?;
        let hop = basin_hopping_with_rng(|t| problem.value_grad(t), &theta.0, &opts.hopping, &mut rng)
            .map_err(wrap)?;
        theta = ParameterVector(hop.x);
        u = adam_fit_state(&u, &theta, obj, &opts.adam, opts.state_scale).map_err(wrap)?;
        let parts = obj.evaluate(&u, &theta).map_err(wrap)?;
        log::debug!("cycle {cycle}: total {:.6e} pde {:.6e}", parts.total(), parts.pde_residual);
        state.history.push(CycleRecord { cycle, parts, accepted: hop.accepted });
        if parts.total() < state.parts.total() {
            state.parts = parts;
            state.u = u.clone();
            state.theta = theta.clone();
            state.best_cycle = cycle;
        }
    }
    Ok(state)
}

pub const CYCLE_LOG_HEADER: [&str; 7] =
    ["cycle", "total", "pde_residual", "data_misfit", "reg_u", "reg_theta", "accepted"];

pub fn write_cycle_log<W: Write>(history: &[CycleRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CYCLE_LOG_HEADER)?;
    for r in history {
        let p = &r.parts;
        out.write_record([
            r.cycle.to_string(),
            p.total().to_string(),
            p.pde_residual.to_string(),
            p.data_misfit.to_string(),
            p.reg_u.to_string(),
            p.reg_theta.to_string(),
            r.accepted.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample;
    use crate::measure::analyze_reduced;
    use crate::symnet::default_parfam_spec;
    use rand::Rng;

    fn small_grid() -> Grid {
        Grid { n_t: 12, n_x: 14, ..Grid::default() }
    }

    fn advection(g: &Grid) -> StateField {
        sample(g, |t, x| (x + 2.0 * t) * t.exp()).unwrap()
    }

    fn true_law(spec: &NetworkSpec) -> ParameterVector {
        spec.theta_for_polynomial_law(&[(vec![1, 0], 1.0), (vec![0, 1], 2.0)]).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = schedules_for(50, 100).unwrap();
        assert_eq!((s.lambda, s.mu), (1250.0, 0.5));
        assert!((s.delta - 8e-5).abs() < 1e-18);
        let s = schedules_for(100, 100).unwrap();
        assert_eq!((s.lambda, s.mu), (10000.0, 1.0));
        assert!((s.delta - 1e-5).abs() < 1e-18);
        let s = schedules_for(1, 2).unwrap();
        assert_eq!((s.lambda, s.mu, s.delta), (0.5, 0.5, 0.2));
        assert!(schedules_for(0, 10).is_err() && schedules_for(11, 10).is_err());
        let mut prev = f64::INFINITY;
        for m in 1..=100 {
            let s = schedules_for(m, 100).unwrap();
            let p = s.mu * s.delta;
            assert!((p - 0.1 / (m * m) as f64).abs() < 1e-15 && p < prev);
            prev = p;
        }
    }

    fn objective(_g: &Grid, m: usize, spec: NetworkSpec, u_data: &StateField) -> Objective {
        let y = analyze_reduced(u_data, m).unwrap();
        Objective::new(ObjectiveConfig::new(spec, y, &schedules_for(m, 100).unwrap())).unwrap()
    }

    #[test]
    fn zero_everything_gives_zero() {
        let g = small_grid();
        let spec = default_parfam_spec(2);
        let obj = objective(&g, 5, spec.clone(), &StateField::zeros(g));
        let theta = ParameterVector(vec![0.0; 82]);
        assert_eq!(obj.evaluate(&StateField::zeros(g), &theta).unwrap().total(), 0.0);
    }

    #[test]
    fn true_law_residual_floor() {
        let g = Grid::default();
        let u = advection(&g);
        let spec = default_parfam_spec(2);
        let mut cfg = ObjectiveConfig::new(spec.clone(), analyze_reduced(&u, 50).unwrap(), &schedules_for(50, 100).unwrap());
        cfg.reg_u_weight = 0.0;
        cfg.reg_theta_weight = 0.0;
        let obj = Objective::new(cfg.clone()).unwrap();
        let p = obj.evaluate(&u, &true_law(&spec)).unwrap();
        assert!(p.pde_residual / cfg.lambda < 1e-3, "{}", p.pde_residual / cfg.lambda);
        assert!(p.data_misfit < 1e-10);
        cfg.lambda *= 2.0;
        let q = Objective::new(cfg).unwrap().evaluate(&u, &true_law(&spec)).unwrap();
        assert_eq!(q.pde_residual, 2.0 * p.pde_residual);
        assert_eq!((q.data_misfit, q.reg_u, q.reg_theta), (p.data_misfit, p.reg_u, p.reg_theta));
    }

    fn random_point(spec: &NetworkSpec, g: &Grid, rng: &mut ChaCha8Rng) -> (StateField, ParameterVector) {
        let layout = spec.layout().unwrap();
        let mut theta = spec.init_theta(rng).unwrap();
        for slot in layout.slots() {
            for v in &mut theta.0[slot.numerator.clone()] {
                *v *= 0.3;
            }
            for v in &mut theta.0[slot.denominator.clone()] {
                *v = rng.random_range(0.1..1.0);
            }
        }
        let a: f64 = rng.random_range(0.5..1.5);
        let b: f64 = rng.random_range(-1.0..1.0);
        let u = sample(g, |t, x| 0.3 * (a * x + t).sin() + 0.2 * b * x * t).unwrap();
        (u, theta)
    }

    #[test]
    fn u_gradient_matches_finite_differences() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = default_parfam_spec(2);
        let data = advection(&g).scale(0.05);
        let obj = objective(&g, 6, spec.clone(), &data);
        let (u, theta) = random_point(&spec, &g, &mut rng);
        let (_, grad) = obj.value_grad_u(&u, &theta).unwrap();
        let total = |v: &StateField| obj.evaluate(v, &theta).unwrap().total();
        for k in (0..g.len()).step_by(7) {
            let h = 1e-5;
            let mut up = u.clone();
            let mut dn = u.clone();
            up.values_mut()[k] += h;
            dn.values_mut()[k] -= h;
            let fd = (total(&up) - total(&dn)) / (2.0 * h);
            let an = grad.values()[k];
            assert!((an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-2), "k={k}: {an} vs {fd}");
        }
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let spec = default_parfam_spec(2);
        let obj = objective(&g, 6, spec.clone(), &advection(&g).scale(0.05));
        let (u, theta) = random_point(&spec, &g, &mut rng);
        let problem = obj.theta_problem(&u).unwrap();
        let (f0, grad) = problem.value_grad(&theta.0).unwrap();
        let exact = obj.evaluate(&u, &theta).unwrap().total();
        assert!((f0 - exact).abs() < 1e-4 * exact.abs().max(1.0));
        for k in 0..theta.len() {
            let h = 1e-6;
            let mut tp = theta.0.clone();
            let mut tm = theta.0.clone();
            tp[k] += h;
            tm[k] -= h;
            let fd = (problem.value_grad(&tp).unwrap().0 - problem.value_grad(&tm).unwrap().0) / (2.0 * h);
            assert!((grad[k] - fd).abs() <= 1e-5 * grad[k].abs().max(fd.abs()).max(1e-2), "k={k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn bfgs_quadratic() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 + rng.random_range(0.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut v = 0.0;
            let mut g = vec![0.0; n];
            for i in 0..n {
                let d = x[i] - c[i];
                v += 0.5 * a[i] * d * d + if i > 0 { 0.1 * d * (x[i - 1] - c[i - 1]) } else { 0.0 };
                g[i] += a[i] * d;
                if i > 0 {
                    g[i] += 0.1 * (x[i - 1] - c[i - 1]);
                    g[i - 1] += 0.1 * d;
                }
            }
            Ok((v, g))
        };
        let r = bfgs(f, &vec![0.0; n], &BfgsOptions { max_iters: 50, ..BfgsOptions::default() }).unwrap();
        for i in 0..n {
            assert!((r.x[i] - c[i]).abs() < 1e-6, "{i}: {} vs {}", r.x[i], c[i]);
        }
        assert!(r.iterations <= 50);
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    }

    #[test]
    fn bfgs_rosenbrock_and_stationary_start() {
        let r = bfgs(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(r.f < 1e-6, "{}", r.f);
        let r = bfgs(rosenbrock, &[1.0, 1.0], &BfgsOptions::default()).unwrap();
        assert_eq!(r.x, vec![1.0, 1.0]);
        assert!(r.converged);
    }

    fn double_well(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = x[0];
        Ok(((x * x - 1.0).powi(2) + 0.3 * x, vec![4.0 * x * (x * x - 1.0) + 0.3]))
    }

    #[test]
    fn basin_hopping_double_well() {
        let opts = HoppingOptions { n_hops: 50, step_scale: 1.0, ..HoppingOptions::default() };
        let mut hits = 0;
        for seed in 0..100 {
            let r = basin_hopping(double_well, &[1.0], &opts, seed).unwrap();
            if r.x[0] < 0.0 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}/100");
        let a = basin_hopping(double_well, &[1.0], &opts, 7).unwrap();
        let b = basin_hopping(double_well, &[1.0], &opts, 7).unwrap();
        assert_eq!(a.x[0].to_bits(), b.x[0].to_bits());
        let none = basin_hopping(double_well, &[1.0], &HoppingOptions { n_hops: 0, ..opts }, 7).unwrap();
        let local = bfgs(double_well, &[1.0], &BfgsOptions::default()).unwrap();
        assert_eq!(none.x, local.x);
        for h in &a.hops {
            assert!(!h.accepted || h.candidate <= h.current || h.acceptance_probability > 0.0);
        }
    }

    #[test]
    fn adam_quadratic_and_fixed_point() {
        let c: Vec<f64> = (0..20).map(|i| 0.004 * (i as f64 - 10.0)).collect();
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((v, x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect()))
        };
        let r = adam(f, &vec![0.0; 20], &AdamOptions::default()).unwrap();
        let err = r.x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / cn < 1e-2, "{}", err / cn);
        let r = adam(f, &c, &AdamOptions::default()).unwrap();
        assert!(r.x.iter().zip(&c).all(|(a, b)| (a - b).abs() <= 1e-10));
        let bad = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((1.0, vec![f64::NAN])) };
        assert!(matches!(adam(bad, &[0.0], &AdamOptions::default()), Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn adam_state_step_is_monotone() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let spec = default_parfam_spec(2);
        let obj = objective(&g, 6, spec.clone(), &advection(&g).scale(0.05));
        let (u, theta) = random_point(&spec, &g, &mut rng);
        let before = obj.evaluate(&u, &theta).unwrap().total();
        let out = adam_fit_state(&u, &theta, &obj, &AdamOptions { max_epochs: 30, ..AdamOptions::default() }, 1.0).unwrap();
        assert!(obj.evaluate(&out, &theta).unwrap().total() <= before);
    }

    #[test]
    fn alternate_contracts() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let spec = default_parfam_spec(2);
        let obj = objective(&g, 6, spec.clone(), &advection(&g).scale(0.05));
        let (u, theta) = random_point(&spec, &g, &mut rng);
        let none = alternate(&u, &theta, &obj, &AlternateOptions { cycles: 0, ..AlternateOptions::quick() }, 1).unwrap();
        assert_eq!(none.u, u);
        assert_eq!(none.theta, theta);
        let opts = AlternateOptions {
            cycles: 2,
            hopping: HoppingOptions { n_hops: 2, bfgs_iters: 20, ..HoppingOptions::default() },
            adam: AdamOptions { max_epochs: 5, ..AdamOptions::default() },
            state_scale: 1.0,
        };
        let s = alternate(&u, &theta, &obj, &opts, 1).unwrap();
        assert!(s.parts.total() <= obj.evaluate(&u, &theta).unwrap().total());
        assert_eq!(s.history.len(), 3);
        let t = alternate(&u, &theta, &obj, &opts, 1).unwrap();
        assert_eq!(s.theta, t.theta);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_cycle_log(&s.history, &mut a).unwrap();
        write_cycle_log(&t.history, &mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("cycle,total,pde_residual"));
    }
}
