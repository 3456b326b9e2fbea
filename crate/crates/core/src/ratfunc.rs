//! Multivariate polynomials over total-degree-bounded monomial bases and
//! pole-free rational functions built from them.
//!
//! Monomials are ordered graded-lexicographically: total degree ascending,
//! then lexicographically ascending on the exponent tuple. A basis of degree
//! `d` is therefore a prefix of every basis of higher degree in the same
//! number of variables, which the network layers use to share monomial
//! evaluations between numerator and denominator.
//!
//! Denominators are restricted to the family of even-exponent monomials with
//! nonnegative coefficients and a constant term bounded below by a floor
//! `epsilon`, normalized to unit Euclidean norm. Every such polynomial is
//! bounded below by its constant coefficient on all of `R^n`.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Default positivity floor for denominator constants.
pub const DEFAULT_FLOOR_EPSILON: f64 = 1e-4;

/// Number of monomials of total degree at most `degree` in `n_vars` variables,
/// `C(n_vars + degree, degree)`.
pub fn monomial_count(n_vars: usize, degree: usize) -> Result<usize> {
    let overflow = || Error::MonomialOverflow { n_vars, degree };
    // C(n+d, d) = prod_{k=1..d} (n + k) / k; every partial product is itself a
    // binomial coefficient, so the division is exact.
    let mut acc: usize = 1;
    for k in 1..=degree {
        let factor = n_vars.checked_add(k).ok_or_else(overflow)?;
        acc = acc.checked_mul(factor).ok_or_else(overflow)? / k;
    }
    Ok(acc)
}

/// Graded-lexicographic monomial basis.
#[derive(Clone, Debug, PartialEq)]
pub struct MonomialBasis {
    n_vars: usize,
    max_degree: usize,
    exponents: Vec<Vec<u32>>,
    /// For every non-constant monomial: (index of the monomial with the first
    /// nonzero exponent lowered by one, that variable).
    parents: Vec<(usize, usize)>,
    /// Partial-derivative table: for monomial `j`, the list of
    /// `(variable, index of lowered monomial, exponent)`.
    lowered: Vec<Vec<(usize, usize, f64)>>,
    /// Offsets: `degree_ends[d]` is the number of monomials with degree <= d.
    degree_ends: Vec<usize>,
}

impl MonomialBasis {
    pub fn new(n_vars: usize, max_degree: usize) -> Result<Self> {
        if n_vars == 0 {
            return Err(Error::InvalidSpec("monomial basis needs at least one variable".into()));
        }
        let total = monomial_count(n_vars, max_degree)?;
        let mut exponents = Vec::with_capacity(total);
        let mut degree_ends = Vec::with_capacity(max_degree + 1);
        let mut scratch = vec![0u32; n_vars];
        for d in 0..=max_degree {
            push_lex(&mut exponents, &mut scratch, 0, d as u32);
            degree_ends.push(exponents.len());
        }
        debug_assert_eq!(exponents.len(), total);

        let index: HashMap<&[u32], usize> =
            exponents.iter().enumerate().map(|(i, e)| (e.as_slice(), i)).collect();
        let mut parents = Vec::with_capacity(total);
        let mut lowered = Vec::with_capacity(total);
        for e in &exponents {
            let mut lower = Vec::new();
            let mut parent = (0, 0);
            let mut found = false;
            for (l, &k) in e.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let mut down = e.clone();
                down[l] -= 1;
                let idx = index[down.as_slice()];
                if !found {
                    parent = (idx, l);
                    found = true;
                }
                lower.push((l, idx, f64::from(k)));
            }
            parents.push(parent);
            lowered.push(lower);
        }

        Ok(Self { n_vars, max_degree, exponents, parents, lowered, degree_ends })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Number of leading monomials with total degree at most `degree`.
    pub fn prefix_len(&self, degree: usize) -> usize {
        self.degree_ends[degree.min(self.max_degree)]
    }

    /// True when every exponent of monomial `j` is even.
    pub fn is_even(&self, j: usize) -> bool {
        self.exponents[j].iter().all(|k| k % 2 == 0)
    }

    /// Evaluates all monomials at `x` into `out` (length `self.len()`).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for j in 1..out.len() {
            let (p, l) = self.parents[j];
            out[j] = out[p] * x[l];
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    /// Accumulates `sum_j coeffs[j] * d(monomial_j)/dx_l` into `grad`, given
    /// precomputed monomial values. `coeffs` may be a prefix of the basis.
    pub fn grad_from_values(&self, coeffs: &[f64], values: &[f64], grad: &mut [f64]) {
        for (j, &c) in coeffs.iter().enumerate().skip(1) {
            if c == 0.0 {
                continue;
            }
            for &(l, idx, k) in &self.lowered[j] {
                grad[l] += c * k * values[idx];
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_vars {
            return Err(Error::DimensionMismatch { expected: self.n_vars, got: x.len() });
        }
        Ok(())
    }
}

/// Appends, in lexicographically ascending order, all tuples whose entries
/// from position `pos` on sum to `remaining`.
fn push_lex(out: &mut Vec<Vec<u32>>, scratch: &mut [u32], pos: usize, remaining: u32) {
    if pos + 1 == scratch.len() {
        scratch[pos] = remaining;
        out.push(scratch.to_vec());
        return;
    }
    for k in 0..=remaining {
        scratch[pos] = k;
        push_lex(out, scratch, pos + 1, remaining - k);
    }
}

/// Dense polynomial with coefficients aligned to a monomial basis.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiPolynomial {
    basis: MonomialBasis,
    coeffs: Vec<f64>,
}

impl MultiPolynomial {
    pub fn new(basis: MonomialBasis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::DimensionMismatch { expected: basis.len(), got: coeffs.len() });
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zero(basis: MonomialBasis) -> Self {
        let coeffs = vec![0.0; basis.len()];
        Self { basis, coeffs }
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Sum over basis monomials in basis order.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let values = self.basis.eval(x)?;
        Ok(dot(&self.coeffs, &values))
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let values = self.basis.eval(x)?;
        let mut grad = vec![0.0; self.basis.n_vars()];
        self.basis.grad_from_values(&self.coeffs, &values, &mut grad);
        Ok(grad)
    }
}

/// Normalized, certified-positive denominator coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct DenominatorCoeffs {
    basis: MonomialBasis,
    coeffs: Vec<f64>,
    floor_epsilon: f64,
}

impl DenominatorCoeffs {
    /// Validates already-normalized coefficients.
    pub fn new(basis: MonomialBasis, coeffs: Vec<f64>, floor_epsilon: f64) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::DimensionMismatch { expected: basis.len(), got: coeffs.len() });
        }
        if !(floor_epsilon > 0.0 && floor_epsilon < 1.0) {
            return Err(Error::InvalidDenominator(format!(
                "floor epsilon {floor_epsilon} must lie in (0, 1)"
            )));
        }
        for (j, &c) in coeffs.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidDenominator(format!("coefficient {j} is {c}")));
            }
            if c != 0.0 && !basis.is_even(j) {
                return Err(Error::InvalidDenominator(format!(
                    "odd monomial {:?} has nonzero coefficient",
                    basis.exponents()[j]
                )));
            }
        }
        if coeffs[0] < floor_epsilon {
            return Err(Error::InvalidDenominator(format!(
                "constant {} below floor {floor_epsilon}",
                coeffs[0]
            )));
        }
        let norm = l2_norm(&coeffs);
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDenominator(format!("norm {norm} is not 1")));
        }
        Ok(Self { basis, coeffs, floor_epsilon })
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn floor_epsilon(&self) -> f64 {
        self.floor_epsilon
    }

    /// Constant coefficient; a lower bound of `q` on all of `R^n`.
    pub fn lower_bound(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let values = self.basis.eval(x)?;
        Ok(dot(&self.coeffs, &values))
    }
}

/// Which branch of the projection produced the output; needed for the
/// Jacobian.
#[derive(Clone, Debug, PartialEq)]
enum ProjectionBranch {
    /// `b = s / |s|`.
    Normalize { norm: f64 },
    /// Constant pinned at `epsilon`, the rest rescaled onto the remaining
    /// sphere radius.
    Floor { rest_norm: f64, rest_scale: f64 },
}

/// Jacobian of [`project_denominator`] at a given raw vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionJacobian {
    active: Vec<bool>,
    output: Vec<f64>,
    branch: ProjectionBranch,
}

impl ProjectionJacobian {
    /// Maps a gradient with respect to the normalized coefficients back to
    /// the raw coefficients. Clamped coordinates receive zero.
    pub fn apply_transpose(&self, grad_b: &[f64]) -> Vec<f64> {
        let n = self.output.len();
        let mut out = vec![0.0; n];
        match self.branch {
            ProjectionBranch::Normalize { norm } => {
                let bg = dot(&self.output, grad_b);
                for k in 0..n {
                    if self.active[k] {
                        out[k] = (grad_b[k] - self.output[k] * bg) / norm;
                    }
                }
            }
            ProjectionBranch::Floor { rest_norm, rest_scale } => {
                // Unit direction of the non-constant part.
                let dir: Vec<f64> = self.output.iter().map(|b| b / rest_scale).collect();
                let bg: f64 = (1..n).map(|k| dir[k] * grad_b[k]).sum();
                for k in 1..n {
                    if self.active[k] {
                        out[k] = rest_scale * (grad_b[k] - dir[k] * bg) / rest_norm;
                    }
                }
            }
        }
        out
    }
}

/// Maps an unconstrained raw vector onto the normalized positive denominator
/// family: odd monomials zeroed, negatives clamped to zero, the constant raised
/// to at least `floor_epsilon`, the result scaled to unit norm. If that leaves
/// the constant below the floor, the constant is pinned at the floor and the
/// remainder rescaled so the norm stays one. Idempotent.
pub fn project_denominator(
    raw: &[f64],
    basis: &MonomialBasis,
    floor_epsilon: f64,
) -> Result<DenominatorCoeffs> {
    project_with_jacobian(raw, basis, floor_epsilon).map(|(d, _)| d)
}

pub fn project_with_jacobian(
    raw: &[f64],
    basis: &MonomialBasis,
    floor_epsilon: f64,
) -> Result<(DenominatorCoeffs, ProjectionJacobian)> {
    if raw.len() != basis.len() {
        return Err(Error::DimensionMismatch { expected: basis.len(), got: raw.len() });
    }
    if !(floor_epsilon > 0.0 && floor_epsilon < 1.0) {
        return Err(Error::InvalidDenominator(format!(
            "floor epsilon {floor_epsilon} must lie in (0, 1)"
        )));
    }
    let n = raw.len();
    let (s, mut active) = clamp_raw(raw, basis, floor_epsilon);

    let norm = l2_norm(&s);
    if !norm.is_finite() {
        return Err(Error::InvalidDenominator("raw denominator norm is not finite".into()));
    }
    let mut b = if (norm - 1.0).abs() <= 8.0 * f64::EPSILON {
        s.clone()
    } else {
        s.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let branch = if b[0] < floor_epsilon {
        let rest_norm = l2_norm(&s[1..]);
        let rest_scale = (1.0 - floor_epsilon * floor_epsilon).sqrt();
        b[0] = floor_epsilon;
        for k in 1..n {
            b[k] = s[k] * rest_scale / rest_norm;
        }
        active[0] = false;
        ProjectionBranch::Floor { rest_norm, rest_scale }
    } else {
        ProjectionBranch::Normalize { norm }
    };

    let jac = ProjectionJacobian { active, output: b.clone(), branch };
    let den = DenominatorCoeffs { basis: basis.clone(), coeffs: b, floor_epsilon };
    Ok((den, jac))
}

/// Zeroes odd monomials, clamps negatives and raises the constant to the
/// floor. Returns the clamped vector and which coordinates passed through.
fn clamp_raw(raw: &[f64], basis: &MonomialBasis, floor_epsilon: f64) -> (Vec<f64>, Vec<bool>) {
    let n = raw.len();
    let mut s = vec![0.0; n];
    let mut active = vec![false; n];
    // NaN raw entries are treated as clamped.
    if raw[0] > floor_epsilon {
        s[0] = raw[0];
        active[0] = true;
    } else {
        s[0] = floor_epsilon;
    }
    for k in 1..n {
        if basis.is_even(k) && raw[k] > 0.0 {
            s[k] = raw[k];
            active[k] = true;
        }
    }
    (s, active)
}

/// `p / q` with `q` from the positive denominator family.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalFunction {
    numerator: MultiPolynomial,
    denominator: DenominatorCoeffs,
}

impl RationalFunction {
    pub fn new(numerator: MultiPolynomial, denominator: DenominatorCoeffs) -> Result<Self> {
        let (a, b) = (numerator.basis().n_vars(), denominator.basis().n_vars());
        if a != b {
            return Err(Error::DimensionMismatch { expected: a, got: b });
        }
        Ok(Self { numerator, denominator })
    }

    /// Builds the rational represented by a raw (numerator, denominator) pair.
    /// Both are divided by the norm of the clamped raw denominator, so the
    /// result is invariant under scaling the pair by a positive factor.
    pub fn from_raw_pair(
        numerator_basis: MonomialBasis,
        numerator_raw: &[f64],
        denominator_basis: MonomialBasis,
        denominator_raw: &[f64],
        floor_epsilon: f64,
    ) -> Result<Self> {
        if denominator_raw.len() != denominator_basis.len() {
            return Err(Error::DimensionMismatch {
                expected: denominator_basis.len(),
                got: denominator_raw.len(),
            });
        }
        let den = project_denominator(denominator_raw, &denominator_basis, floor_epsilon)?;
        let (clamped, _) = clamp_raw(denominator_raw, &denominator_basis, floor_epsilon);
        let scale = l2_norm(&clamped);
        let coeffs = numerator_raw.iter().map(|a| a / scale).collect();
        let num = MultiPolynomial::new(numerator_basis, coeffs)?;
        Self::new(num, den)
    }

    pub fn numerator(&self) -> &MultiPolynomial {
        &self.numerator
    }

    pub fn denominator(&self) -> &DenominatorCoeffs {
        &self.denominator
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.numerator.eval(x)? / self.denominator.eval(x)?)
    }

    /// Quotient rule `(q grad p - p grad q) / q^2`.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.numerator.eval(x)?;
        let q = self.denominator.eval(x)?;
        let gp = self.numerator.grad(x)?;
        let values = self.denominator.basis().eval(x)?;
        let mut gq = vec![0.0; x.len()];
        self.denominator.basis().grad_from_values(self.denominator.coeffs(), &values, &mut gq);
        Ok(gp.iter().zip(&gq).map(|(a, b)| (q * a - p * b) / (q * q)).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
