//! Readable expressions from trained networks, and comparisons of recovered
//! laws against references.
//!
//! Extraction works in the original input coordinates: the input scaling of
//! the network is folded into the printed coefficients. Pruning first drops
//! denominator entries that are small after normalization, then numerator
//! coefficients that are small after a constant denominator has been folded
//! in. [`prune_theta`] applies the same rule to the raw parameter vector, so
//! the expression evaluates exactly like the pruned network.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratfunc::{project_denominator, MonomialBasis};
use crate::symnet::{ActivationKind, Network, NetworkSpec, ParameterVector, EXP_CLAMP};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Var {
    U,
    Ux,
    T,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::U => "u",
            Var::Ux => "u_x",
            Var::T => "t",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Expr {
    Constant { value: f64 },
    Variable { var: Var },
    Sum { terms: Vec<Expr> },
    Product { factors: Vec<Expr> },
    Power { base: Box<Expr>, exponent: u32 },
    Quotient { numerator: Box<Expr>, denominator: Box<Expr> },
    Sine { arg: Box<Expr> },
    Exponential { arg: Box<Expr> },
}

impl Expr {
    /// Evaluates at `(u, u_x, t)`. Exponentials clamp their argument the way
    /// the network does.
    pub fn eval(&self, u: f64, ux: f64, t: f64) -> f64 {
        match self {
            Expr::Constant { value } => *value,
            Expr::Variable { var } => match var {
                Var::U => u,
                Var::Ux => ux,
                Var::T => t,
            },
            Expr::Sum { terms } => terms.iter().map(|e| e.eval(u, ux, t)).sum(),
            Expr::Product { factors } => factors.iter().map(|e| e.eval(u, ux, t)).product(),
            Expr::Power { base, exponent } => base.eval(u, ux, t).powi(*exponent as i32),
            Expr::Quotient { numerator, denominator } => numerator.eval(u, ux, t) / denominator.eval(u, ux, t),
            Expr::Sine { arg } => arg.eval(u, ux, t).sin(),
            Expr::Exponential { arg } => arg.eval(u, ux, t).clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
        }
    }

    fn is_atom(&self) -> bool {
        matches!(
            self,
            Expr::Variable { .. } | Expr::Constant { .. } | Expr::Sine { .. } | Expr::Exponential { .. }
        )
    }

    /// Monomial terms, including those nested inside activations and
    /// quotients.
    fn count_terms(&self) -> usize {
        match self {
            Expr::Constant { value } if *value == 0.0 => 0,
            Expr::Sum { terms } => terms.iter().map(Expr::count_terms).sum(),
            Expr::Quotient { numerator, denominator } => numerator.count_terms() + denominator.count_terms(),
            _ => 1 + self.nested_terms(),
        }
    }

    fn nested_terms(&self) -> usize {
        match self {
            Expr::Constant { .. } | Expr::Variable { .. } => 0,
            Expr::Power { base, .. } => base.nested_terms(),
            Expr::Product { factors } => factors.iter().map(Expr::nested_terms).sum(),
            Expr::Sine { arg } | Expr::Exponential { arg } => arg.count_terms(),
            Expr::Quotient { .. } | Expr::Sum { .. } => self.count_terms(),
        }
    }
}

/// Number formatting for printing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Fixed decimals, trailing zeros stripped; magnitudes below one unit in
    /// the last place switch to scientific notation.
    Decimals(usize),
    /// Shortest representation that round-trips.
    Full,
}

fn format_number(v: f64, p: Precision) -> String {
    match p {
        Precision::Full => format!("{v}"),
        Precision::Decimals(d) => {
            if v != 0.0 && v.abs() < 10f64.powi(-(d as i32)) {
                return format!("{v:.2e}");
            }
            let s = format!("{v:.d$}");
            let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
            if s == "-0" {
                "0".into()
            } else {
                s
            }
        }
    }
}

/// Splits a term into its numeric coefficient and the remaining factors.
fn split_coefficient(e: &Expr) -> (f64, Vec<&Expr>) {
    match e {
        Expr::Constant { value } => (*value, Vec::new()),
        Expr::Product { factors } => {
            let mut c = 1.0;
            let mut rest = Vec::new();
            for f in factors {
                if let Expr::Constant { value } = f {
                    c *= value;
                } else {
                    rest.push(f);
                }
            }
            (c, rest)
        }
        other => (1.0, vec![other]),
    }
}

fn write_expr(out: &mut String, e: &Expr, p: Precision) {
    match e {
        Expr::Constant { value } => out.push_str(&format_number(*value, p)),
        Expr::Variable { var } => out.push_str(var.name()),
        Expr::Sum { terms } if terms.is_empty() => out.push('0'),
        Expr::Sum { terms } => {
            for (k, term) in terms.iter().enumerate() {
                let (c, rest) = split_coefficient(term);
                let neg = c < 0.0;
                if k == 0 {
                    if neg {
                        out.push('-');
                    }
                } else {
                    out.push_str(if neg { " - " } else { " + " });
                }
                write_term(out, c.abs(), &rest, p);
            }
        }
        Expr::Product { .. } => {
            let (c, rest) = split_coefficient(e);
            if c < 0.0 {
                out.push('-');
            }
            write_term(out, c.abs(), &rest, p);
        }
        Expr::Power { base, exponent } => {
            write_factor(out, base, p);
            let _ = write!(out, "^{exponent}");
        }
        Expr::Quotient { numerator, denominator } => {
            out.push('(');
            write_expr(out, numerator, p);
            out.push_str(")/(");
            write_expr(out, denominator, p);
            out.push(')');
        }
        Expr::Sine { arg } => {
            out.push_str("sin(");
            write_expr(out, arg, p);
            out.push(')');
        }
        Expr::Exponential { arg } => {
            out.push_str("exp(");
            write_expr(out, arg, p);
            out.push(')');
        }
    }
}

fn write_term(out: &mut String, c: f64, rest: &[&Expr], p: Precision) {
    let coeff = format_number(c, p);
    if rest.is_empty() {
        out.push_str(&coeff);
        return;
    }
    let mut first = true;
    if coeff != "1" {
        out.push_str(&coeff);
        first = false;
    }
    for f in rest {
        if !first {
            out.push('·');
        }
        first = false;
        write_factor(out, f, p);
    }
}

fn write_factor(out: &mut String, e: &Expr, p: Precision) {
    if e.is_atom() || matches!(e, Expr::Power { .. } | Expr::Quotient { .. }) {
        write_expr(out, e, p);
    } else {
        out.push('(');
        write_expr(out, e, p);
        out.push(')');
    }
}

/// A symbolic law `f(u, u_x)` (optionally `t`-dependent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub root: Expr,
}

#[derive(Serialize, Deserialize)]
struct ExpressionFile {
    format: String,
    version: u32,
    root: Expr,
}

pub const EXPRESSION_FORMAT: &str = "lawforge-expression";

impl Expression {
    pub fn zero() -> Self {
        Self { root: Expr::Constant { value: 0.0 } }
    }

    /// `sum c * u^a * u_x^b` from `(a, b, c)` triples, in the given order.
    pub fn polynomial(terms: &[(u32, u32, f64)]) -> Self {
        let terms: Vec<Expr> = terms
            .iter()
            .filter(|(_, _, c)| *c != 0.0)
            .map(|&(a, b, c)| monomial_term(c, &[(Var::U, a), (Var::Ux, b)]))
            .collect();
        Self::from_terms(terms)
    }

    /// `c0 + c_u * u + c_ux * u_x`.
    pub fn linear(c0: f64, c_u: f64, c_ux: f64) -> Self {
        Self::polynomial(&[(0, 0, c0), (0, 1, c_ux), (1, 0, c_u)])
    }

    fn from_terms(terms: Vec<Expr>) -> Self {
        match terms.len() {
            0 => Self::zero(),
            _ => Self { root: Expr::Sum { terms } },
        }
    }

    pub fn eval(&self, u: f64, ux: f64) -> f64 {
        self.root.eval(u, ux, 0.0)
    }

    pub fn term_count(&self) -> usize {
        self.root.count_terms()
    }

    pub fn to_text(&self, precision: Precision) -> String {
        let mut s = String::new();
        write_expr(&mut s, &self.root, precision);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let f = ExpressionFile { format: EXPRESSION_FORMAT.into(), version: 1, root: self.root.clone() };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ExpressionFile = serde_json::from_str(text)?;
        if f.format != EXPRESSION_FORMAT || f.version != 1 {
            return Err(Error::Parse(format!("unsupported expression file `{}` v{}", f.format, f.version)));
        }
        Ok(Self { root: f.root })
    }
}

impl std::fmt::Display for Expression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text(Precision::Decimals(3)))
    }
}

fn power(base: Expr, k: u32) -> Expr {
    if k == 1 {
        base
    } else {
        Expr::Power { base: Box::new(base), exponent: k }
    }
}

fn monomial_term(c: f64, vars: &[(Var, u32)]) -> Expr {
    let mut factors = Vec::new();
    for &(v, k) in vars {
        if k > 0 {
            factors.push(power(Expr::Variable { var: v }, k));
        }
    }
    if factors.is_empty() {
        return Expr::Constant { value: c };
    }
    if c != 1.0 {
        factors.insert(0, Expr::Constant { value: c });
    }
    if factors.len() == 1 {
        factors.pop().expect("one factor")
    } else {
        Expr::Product { factors }
    }
}

/// One layer of the network after pruning, in original coordinates.
struct PrunedUnit {
    /// Numerator coefficients per monomial of the layer basis (zero when
    /// pruned), for the raw input variables.
    numerator: Vec<f64>,
    /// Denominator in the same coordinates; `None` when it is a constant
    /// already folded into the numerator.
    denominator: Option<Vec<f64>>,
}

/// Factor applied to a scaled-coordinate coefficient of monomial `exps` to
/// obtain the coefficient in original coordinates. `scales` has one entry per
/// layer variable (1 for hidden outputs).
fn coordinate_factor(exps: &[u32], scales: &[f64]) -> f64 {
    exps.iter().zip(scales).map(|(&k, s)| s.powi(-(k as i32))).product()
}

fn layer_scales(spec: &NetworkSpec, layer: usize) -> Vec<f64> {
    if layer == 0 {
        spec.input_scale.clone()
    } else if layer == spec.depth() {
        let mut s = vec![1.0; spec.last_hidden_width()];
        s.extend_from_slice(&spec.input_scale);
        s
    } else {
        vec![1.0; spec.hidden[layer - 1].len()]
    }
}

/// Zeroes the parameters removed by pruning at `threshold`.
pub fn prune_theta(spec: &NetworkSpec, theta: &ParameterVector, threshold: f64) -> Result<ParameterVector> {
    Ok(prune(spec, theta, threshold)?.0)
}

fn prune(spec: &NetworkSpec, theta: &ParameterVector, threshold: f64) -> Result<(ParameterVector, Vec<PrunedUnit>)> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::Config(format!("prune threshold must be nonnegative, got {threshold}")));
    }
    let layout = spec.layout()?;
    layout.check(theta)?;
    let mut pruned = theta.clone();
    let mut units = Vec::new();
    for slot in layout.slots() {
        let deg = spec.degrees[slot.layer];
        let num_basis = MonomialBasis::new(slot.n_vars, deg.numerator)?;
        let den_basis = MonomialBasis::new(slot.n_vars, deg.denominator)?;
        let scales = layer_scales(spec, slot.layer);

        let raw = &mut pruned.0[slot.denominator.clone()];
        let before = project_denominator(raw, &den_basis, spec.floor_epsilon)?;
        for (j, r) in raw.iter_mut().enumerate().skip(1) {
            if before.coeffs()[j] < threshold {
                *r = 0.0;
            }
        }
        let den = project_denominator(raw, &den_basis, spec.floor_epsilon)?;
        let den_coords: Vec<f64> = den
            .coeffs()
            .iter()
            .zip(den_basis.exponents())
            .map(|(b, e)| b * coordinate_factor(e, &scales))
            .collect();
        let constant = den.coeffs().iter().skip(1).all(|b| *b == 0.0);
        let mut fold = if constant { 1.0 / den.coeffs()[0] } else { 1.0 };
        if slot.layer == spec.depth() {
            fold *= spec.output_scale;
        }

        let num = &mut pruned.0[slot.numerator.clone()];
        let mut numerator = vec![0.0; num.len()];
        for (j, c) in num.iter_mut().enumerate() {
            let eff = *c * coordinate_factor(&num_basis.exponents()[j], &scales) * fold;
            if eff.abs() < threshold || eff == 0.0 {
                *c = 0.0;
            } else {
                numerator[j] = eff;
            }
        }
        units.push(PrunedUnit { numerator, denominator: (!constant).then_some(den_coords) });
    }
    Ok((pruned, units))
}

/// Terms of `sum_j c_j prod_l factors[l]^e_jl` in basis order. Constant
/// factors are multiplied into the coefficients and like terms merged.
fn polynomial_expr(coeffs: &[f64], basis: &MonomialBasis, factors: &[Expr]) -> Vec<Expr> {
    let mut merged: Vec<f64> = vec![0.0; basis.len()];
    for (c, exps) in coeffs.iter().zip(basis.exponents()) {
        if *c == 0.0 {
            continue;
        }
        let mut coeff = *c;
        let mut reduced = exps.clone();
        for (l, f) in factors.iter().enumerate() {
            if let Expr::Constant { value } = f {
                coeff *= value.powi(reduced[l] as i32);
                reduced[l] = 0;
            }
        }
        let j = basis.exponents().iter().position(|e| *e == reduced).expect("lower degree is in basis");
        merged[j] += coeff;
    }
    let mut out = Vec::new();
    for (c, exps) in merged.iter().zip(basis.exponents()) {
        if *c == 0.0 {
            continue;
        }
        let mut fs = Vec::new();
        for (f, &k) in factors.iter().zip(exps) {
            if k > 0 {
                fs.push(power(f.clone(), k));
            }
        }
        if fs.is_empty() {
            out.push(Expr::Constant { value: *c });
            continue;
        }
        if *c != 1.0 {
            fs.insert(0, Expr::Constant { value: *c });
        }
        out.push(if fs.len() == 1 { fs.pop().expect("one factor") } else { Expr::Product { factors: fs } });
    }
    out
}

/// The pruned law as an expression in `(u, u_x)`.
pub fn to_expression(spec: &NetworkSpec, theta: &ParameterVector, threshold: f64) -> Result<Expression> {
    if spec.input_dim != 2 {
        return Err(Error::InvalidSpec("expressions are built for laws in (u, u_x)".into()));
    }
    let (_, units) = prune(spec, theta, threshold)?;
    let skip = vec![Expr::Variable { var: Var::U }, Expr::Variable { var: Var::Ux }];
    let mut inputs = skip.clone();
    let mut idx = 0;
    for layer in 0..=spec.depth() {
        let deg = spec.degrees[layer];
        let n_vars = spec.layer_input_dim(layer);
        let num_basis = MonomialBasis::new(n_vars, deg.numerator)?;
        let den_basis = MonomialBasis::new(n_vars, deg.denominator)?;
        let mut outputs = Vec::new();
        for k in 0..spec.layer_units(layer) {
            let unit = &units[idx];
            idx += 1;
            let num = Expression::from_terms(polynomial_expr(&unit.numerator, &num_basis, &inputs)).root;
            let rational = match &unit.denominator {
                None => num,
                Some(den) => {
                    let d = Expression::from_terms(polynomial_expr(den, &den_basis, &inputs)).root;
                    if matches!(num, Expr::Constant { value } if value == 0.0) {
                        num
                    } else {
                        Expr::Quotient { numerator: Box::new(num), denominator: Box::new(d) }
                    }
                }
            };
            if layer < spec.depth() {
                let kind = spec.hidden[layer][k];
                outputs.push(match (&rational, kind) {
                    (Expr::Constant { value }, _) => Expr::Constant { value: kind.apply(*value).0 },
                    (_, ActivationKind::Sine) => Expr::Sine { arg: Box::new(rational) },
                    (_, ActivationKind::Exponential) => Expr::Exponential { arg: Box::new(rational) },
                });
            } else {
                outputs.push(rational);
            }
        }
        if layer < spec.depth() {
            inputs = outputs;
            if layer + 1 == spec.depth() {
                inputs.extend(skip.iter().cloned());
            }
        } else {
            return Ok(Expression { root: outputs.pop().expect("single output") });
        }
    }
    unreachable!("output layer returns")
}

/// Axis-aligned rectangle in `(u, u_x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub u: (f64, f64),
    pub ux: (f64, f64),
}

impl InputBox {
    pub fn new(u: (f64, f64), ux: (f64, f64)) -> Result<Self> {
        let b = Self { u, ux };
        b.validate()?;
        Ok(b)
    }

    pub fn unit() -> Self {
        Self { u: (0.0, 1.0), ux: (0.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && b > a;
        if !(ok(self.u) && ok(self.ux)) {
            return Err(Error::Config(format!("degenerate input box {self:?}")));
        }
        Ok(())
    }

    fn at(&self, s: f64, r: f64) -> (f64, f64) {
        (self.u.0 + s * (self.u.1 - self.u.0), self.ux.0 + r * (self.ux.1 - self.ux.0))
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}

/// The first `n` points (after index 0) of the 2-D Halton sequence.
pub fn halton_2d(n: usize) -> Vec<(f64, f64)> {
    (1..=n as u64).map(|i| (radical_inverse(i, 2), radical_inverse(i, 3))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLawFit {
    pub c0: f64,
    pub c_u: f64,
    pub c_ux: f64,
    /// RMS of the least-squares residual over the samples.
    pub residual: f64,
}

/// Least-squares projection of `expr` onto `span{1, u, u_x}` over Halton
/// samples of the box.
pub fn fit_linear_law(expr: &Expression, bx: &InputBox, n_samples: usize) -> Result<LinearLawFit> {
    bx.validate()?;
    if n_samples < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n_samples });
    }
    let pts: Vec<(f64, f64)> = halton_2d(n_samples).into_iter().map(|(s, r)| bx.at(s, r)).collect();
    let a = DMatrix::from_fn(n_samples, 3, |i, j| match j {
        0 => 1.0,
        1 => pts[i].0,
        _ => pts[i].1,
    });
    let b = DVector::from_iterator(n_samples, pts.iter().map(|&(u, ux)| expr.eval(u, ux)));
    let c = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Config(format!("least squares failed: {e}")))?;
    let r = &a * &c - &b;
    Ok(LinearLawFit { c0: c[0], c_u: c[1], c_ux: c[2], residual: (r.norm_squared() / n_samples as f64).sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelError {
    pub rms: f64,
    pub max: f64,
}

/// Deviation between the network and `reference` on the cell-centered
/// `n_grid x n_grid` lattice of the box.
pub fn model_error_on_box(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    reference: &Expression,
    bx: &InputBox,
    n_grid: usize,
) -> Result<ModelError> {
    bx.validate()?;
    if n_grid == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let net = Network::new(spec, theta)?;
    let mut tape = net.tape();
    let (mut sq, mut max) = (0.0, 0.0f64);
    for i in 0..n_grid {
        for j in 0..n_grid {
            let (u, ux) = bx.at((i as f64 + 0.5) / n_grid as f64, (j as f64 + 0.5) / n_grid as f64);
            let d = net.forward_tape(&[u, ux], &mut tape) - reference.eval(u, ux);
            sq += d * d;
            max = max.max(d.abs());
        }
    }
    Ok(ModelError { rms: (sq / (n_grid * n_grid) as f64).sqrt(), max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symnet::{default_parfam_spec, forward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_theta(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> ParameterVector {
        let layout = spec.layout().unwrap();
        let mut t = spec.init_theta(rng).unwrap();
        for slot in layout.slots() {
            for v in &mut t.0[slot.denominator.clone()] {
                *v = rng.random_range(0.0..1.0);
            }
        }
        t
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(2.0, Precision::Decimals(3)), "2");
        assert_eq!(format_number(1.006, Precision::Decimals(3)), "1.006");
        assert_eq!(format_number(-0.0004, Precision::Decimals(3)), "-4.00e-4");
        assert_eq!(format_number(0.1, Precision::Full), "0.1");
        assert_eq!(format_number(-0.0001, Precision::Decimals(2)), "-1.00e-4");
    }

    #[test]
    fn zero_theta_prints_zero() {
        let spec = default_parfam_spec(2);
        let e = to_expression(&spec, &ParameterVector(vec![0.0; 82]), 1e-3).unwrap();
        assert_eq!(e.to_string(), "0");
        assert_eq!(e.term_count(), 0);
        let e = to_expression(&spec, &spec.theta_for_polynomial_law(&[]).unwrap(), 1e-3).unwrap();
        assert_eq!(e.to_string(), "0");
    }

    #[test]
    fn skip_path_law_prints_canonically() {
        let mut spec = default_parfam_spec(2);
        for (scale, out) in [(vec![1.0, 1.0], 1.0), (vec![200.0, 60.0], 240.0)] {
            spec.input_scale = scale;
            spec.output_scale = out;
            let theta = spec.theta_for_polynomial_law(&[(vec![1, 0], 1.0), (vec![0, 1], 2.0)]).unwrap();
            let e = to_expression(&spec, &theta, 1e-3).unwrap();
            assert_eq!(e.to_string(), "2·u_x + u");
        }
    }

    #[test]
    fn learned_law_shape() {
        let spec = default_parfam_spec(2);
        let theta = spec
            .theta_for_polynomial_law(&[
                (vec![1, 0], 1.006),
                (vec![0, 2], -0.005),
                (vec![0, 1], 2.116),
                (vec![0, 0], -0.535),
            ])
            .unwrap();
        let e = to_expression(&spec, &theta, 1e-3).unwrap();
        assert_eq!(e.to_string(), "-0.535 + 2.116·u_x + 1.006·u - 0.005·u_x^2");
        assert_eq!(e.term_count(), 4);
    }

    #[test]
    fn round_trip_matches_pruned_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut spec = default_parfam_spec(2);
        spec.input_scale = vec![3.0, 0.5];
        spec.output_scale = 2.5;
        for thr in [0.0, 1e-3, 0.05, 0.3] {
            let theta = random_theta(&spec, &mut rng);
            let pruned = prune_theta(&spec, &theta, thr).unwrap();
            let e = to_expression(&spec, &theta, thr).unwrap();
            for _ in 0..100 {
                let (u, ux) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let want = forward(&spec, &pruned, &[u, ux]).unwrap();
                let got = e.eval(u, ux);
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "thr={thr}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn pruning_is_monotone_and_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let spec = default_parfam_spec(2);
        for _ in 0..10 {
            let theta = random_theta(&spec, &mut rng);
            let mut prev = usize::MAX;
            for thr in [0.0, 1e-3, 0.01, 0.1, 0.3, 0.6, 1.1] {
                let n = to_expression(&spec, &theta, thr).unwrap().term_count();
                assert!(n <= prev, "thr={thr}: {n} > {prev}");
                prev = n;
            }
            let thr = 0.2;
            let pruned = prune_theta(&spec, &theta, thr).unwrap();
            assert_eq!(
                to_expression(&spec, &theta, thr).unwrap().to_string(),
                to_expression(&spec, &pruned, thr).unwrap().to_string()
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let spec = default_parfam_spec(2);
        let e = to_expression(&spec, &random_theta(&spec, &mut rng), 0.1).unwrap();
        assert_eq!(Expression::from_json(&e.to_json().unwrap()).unwrap(), e);
        assert!(e.to_text(Precision::Full).len() >= e.to_string().len());
    }

    #[test]
    fn linear_fit_examples() {
        let bx = InputBox::unit();
        let f = fit_linear_law(&Expression::linear(0.0, 1.0, 2.0), &bx, 200).unwrap();
        assert!(f.c0.abs() < 1e-10 && (f.c_u - 1.0).abs() < 1e-10 && (f.c_ux - 2.0).abs() < 1e-10);
        assert!(f.residual <= 1e-10);
        let f = fit_linear_law(&Expression::linear(0.0, -0.982, -0.016), &bx, 200).unwrap();
        assert!((f.c_u + 0.982).abs() < 1e-10 && (f.c_ux + 0.016).abs() < 1e-10 && f.c0.abs() < 1e-10);
        assert!(fit_linear_law(&Expression::linear(0.0, 1.0, 0.0), &bx, 2).is_err());
        assert!(InputBox::new((0.0, 0.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn quadratic_fit_matches_normal_equations() {
        let bx = InputBox::unit();
        let n = 500;
        let fit = fit_linear_law(&Expression::polynomial(&[(2, 0, 1.0)]), &bx, n).unwrap();
        // Independent oracle: 3x3 normal equations solved by Cramer's rule.
        let pts = halton_2d(n);
        let mut ata = [[0.0; 3]; 3];
        let mut atb = [0.0; 3];
        for &(u, ux) in &pts {
            let row = [1.0, u, ux];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * u * u;
            }
        }
        let det3 = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det3(ata);
        let mut coef = [0.0; 3];
        for k in 0..3 {
            let mut m = ata;
            for i in 0..3 {
                m[i][k] = atb[i];
            }
            coef[k] = det3(m) / d;
        }
        let rss: f64 = pts
            .iter()
            .map(|&(u, ux)| (coef[0] + coef[1] * u + coef[2] * ux - u * u).powi(2))
            .sum();
        let rms = (rss / n as f64).sqrt();
        assert!(fit.residual > 0.0);
        assert!((fit.residual - rms).abs() < 1e-8, "{} vs {rms}", fit.residual);
        assert!((fit.c_u - coef[1]).abs() < 1e-8);
    }

    #[test]
    fn model_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let spec = default_parfam_spec(2);
        let bx = InputBox::unit();
        let zero = spec.theta_for_polynomial_law(&[]).unwrap();
        let e = model_error_on_box(&spec, &zero, &Expression::linear(0.0, 1.0, 0.0), &bx, 1000).unwrap();
        assert!((e.rms - 1.0 / 3f64.sqrt()).abs() < 1e-6, "{}", e.rms);
        let theta = random_theta(&spec, &mut rng);
        let own = to_expression(&spec, &theta, 0.0).unwrap();
        let e = model_error_on_box(&spec, &theta, &own, &bx, 50).unwrap();
        assert!(e.max <= 1e-9, "{}", e.max);
    }
}
